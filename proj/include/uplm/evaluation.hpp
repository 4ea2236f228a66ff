#pragma once

// Bits per character, result tables and the unigram-distance analysis.

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "uplm/config.hpp"
#include "uplm/corpus.hpp"
#include "uplm/errors.hpp"
#include "uplm/model.hpp"

namespace uplm {

struct LogLoss {
    /// Summed negative natural-log probability.
    double nats{0.0};
    /// Predicted characters, EOS included.
    std::size_t chars{0};

    [[nodiscard]] double bpc() const { return nats / (static_cast<double>(chars) * std::numbers::ln2); }
};

/// Scores `sentences` in order in eval mode. With `carry_state` the recurrent
/// state flows from one sentence into the next; it always starts at zero.
inline LogLoss score_split(const ModelParameters& params, std::span<const Sentence> sentences,
                           std::span<const double> typology = {}, bool carry_state = true) {
    if (sentences.empty()) throw DataError("cannot score an empty split");
    ModelRunner runner{params, typology};
    LstmState state;
    LogLoss out;
    for (const auto& s : sentences) {
        if (!carry_state) state = LstmState{};
        const auto seg = make_single_segment(s);
        out.nats += runner.nll(seg, state, DropoutPlan::eval());
        out.chars += seg.predicted();
    }
    if (!std::isfinite(out.nats)) throw NumericError("non-finite log-likelihood while scoring");
    return out;
}

/// -sum ln p / (N ln 2) over every predicted character of the split.
inline double bpc(const ModelParameters& params, std::span<const Sentence> sentences, std::span<const double> typology = {},
                  bool carry_state = true) {
    return score_split(params, sentences, typology, carry_state).bpc();
}

/// Sample Pearson correlation.
inline double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw std::invalid_argument("pearson: vectors differ in length");
    if (x.size() < 2) throw std::invalid_argument("pearson: need at least two points");
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("pearson: constant input");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct CharDistanceResult {
    std::vector<std::string> language_ids;
    /// Cosine distance between a language's unigram counts and the mean of the others.
    std::vector<double> distances;
    std::vector<double> bpc;
    double rho{0.0};
    std::size_t n{0};
};

inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
    if (aa == 0.0 || bb == 0.0) throw DataError("cosine distance of a zero vector");
    return std::max(0.0, 1.0 - ab / std::sqrt(aa * bb));
}

/// `counts[i]` is the unigram count vector of `ids[i]`; every id needs a BPC.
inline CharDistanceResult char_distance_analysis(const std::vector<std::string>& ids,
                                                 const std::vector<std::vector<double>>& counts,
                                                 const std::map<std::string, double>& bpc_by_language) {
    if (ids.size() != counts.size()) throw std::invalid_argument("char_distance_analysis: ids and counts differ");
    if (ids.size() < 3) throw DataError("character distance analysis needs at least 3 languages");
    CharDistanceResult r;
    r.language_ids = ids;
    r.n = ids.size();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (std::all_of(counts[i].begin(), counts[i].end(), [](double c) { return c == 0.0; })) {
            throw DataError("language '" + ids[i] + "' has an all-zero character distribution");
        }
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::vector<double> mean(counts[i].size(), 0.0);
        for (std::size_t j = 0; j < ids.size(); ++j) {
            if (j == i) continue;
            if (counts[j].size() != mean.size()) throw std::invalid_argument("char_distance_analysis: ragged counts");
            for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += counts[j][k];
        }
        for (double& m : mean) m /= static_cast<double>(ids.size() - 1);
        r.distances.push_back(cosine_distance(counts[i], mean));
        const auto it = bpc_by_language.find(ids[i]);
        if (it == bpc_by_language.end()) throw DataError("no BPC for language '" + ids[i] + "'");
        r.bpc.push_back(it->second);
    }
    r.rho = pearson(r.distances, r.bpc);
    return r;
}

// ---------------------------------------------------------------------------
// Result tables

struct ResultRow {
    std::string language;
    std::string regime;
    std::string prior;
    std::string conditioning;
    double bpc{0.0};
};

class ResultTable {
public:
    static constexpr const char* all_label = "All";

    void add(ResultRow row) {
        if (!(row.bpc >= 0.0)) throw NumericError("negative or undefined BPC for " + row.language);
        rows_.push_back(std::move(row));
    }

    [[nodiscard]] const std::vector<ResultRow>& rows() const noexcept { return rows_; }

    /// Appends one "All" row per (regime, prior, conditioning) group holding the
    /// unweighted mean over languages. Existing "All" rows are replaced.
    void add_aggregates() {
        std::erase_if(rows_, [](const ResultRow& r) { return r.language == all_label; });
        std::vector<std::tuple<std::string, std::string, std::string>> keys;
        std::map<std::tuple<std::string, std::string, std::string>, std::pair<double, std::size_t>> sums;
        for (const auto& r : rows_) {
            auto key = std::make_tuple(r.regime, r.prior, r.conditioning);
            auto [it, inserted] = sums.try_emplace(key, 0.0, 0);
            if (inserted) keys.push_back(key);
            it->second.first += r.bpc;
            it->second.second += 1;
        }
        for (const auto& k : keys) {
            const auto& [sum, n] = sums[k];
            rows_.push_back({all_label, std::get<0>(k), std::get<1>(k), std::get<2>(k), sum / static_cast<double>(n)});
        }
    }

    [[nodiscard]] std::optional<double> find(std::string_view language, std::string_view regime, std::string_view prior,
                                             std::string_view conditioning) const {
        for (const auto& r : rows_) {
            if (r.language == language && r.regime == regime && r.prior == prior && r.conditioning == conditioning) return r.bpc;
        }
        return std::nullopt;
    }

    [[nodiscard]] std::string to_tsv() const {
        std::ostringstream os;
        os.precision(17);
        os << "language\tregime\tprior\tconditioning\tbpc\n";
        for (const auto& r : rows_) {
            os << r.language << '\t' << r.regime << '\t' << r.prior << '\t' << r.conditioning << '\t' << r.bpc << '\n';
        }
        return os.str();
    }

    static ResultTable parse_tsv(std::string_view text) {
        ResultTable t;
        std::istringstream in{std::string{text}};
        std::string line;
        bool header = true;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            if (header) {
                header = false;
                if (line.starts_with("language\t")) continue;
            }
            const auto cells = detail::split(line, '\t');
            if (cells.size() != 5) throw DataError("result table: expected 5 columns in '" + line + "'");
            double v = 0.0;
            try {
                v = KeyValueConfig::to_double("bpc", detail::trim(cells[4]));
            } catch (const ConfigError& e) {
                throw DataError(std::string{"result table: "} + e.what());
            }
            t.rows_.push_back({cells[0], cells[1], cells[2], cells[3], v});
        }
        return t;
    }

private:
    std::vector<ResultRow> rows_;
};

}  // namespace uplm
