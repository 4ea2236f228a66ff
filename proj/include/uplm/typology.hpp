#pragma once

// Typological feature tables: loading, k-nearest-neighbour imputation and the
// shared ReLU encoder f(t) = max(0, W t + b).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "uplm/config.hpp"
#include "uplm/errors.hpp"
#include "uplm/rng.hpp"

namespace uplm {

struct TypologyVector {
    std::string language_id;
    std::vector<double> values;
    std::vector<bool> missing;

    [[nodiscard]] bool complete() const {
        return std::none_of(missing.begin(), missing.end(), [](bool m) { return m; });
    }
};

struct TypologyTable {
    std::vector<std::string> feature_names;
    std::vector<TypologyVector> rows;

    [[nodiscard]] std::size_t feature_count() const noexcept { return feature_names.size(); }

    [[nodiscard]] const TypologyVector* find(std::string_view id) const noexcept {
        for (const auto& r : rows) {
            if (r.language_id == id) return &r;
        }
        return nullptr;
    }

    [[nodiscard]] const TypologyVector& at(std::string_view id) const {
        if (const auto* r = find(id)) return *r;
        throw DataError("no typology vector for language '" + std::string{id} + "'");
    }
};

/// Tab-separated: header `lang<TAB>feature...`, one row per language; an empty
/// cell is a missing value; every present value must lie in [0, 1].
inline TypologyTable parse_typology(std::string_view text, std::string_view origin = "<typology>") {
    TypologyTable table;
    std::istringstream in{std::string{text}};
    std::string line;
    std::size_t lineno = 0;
    bool header = true;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = detail::split(line, '\t');
        if (header) {
            if (cells.size() < 2 || detail::trim(cells[0]) != "lang") {
                throw DataError(std::string{origin} + ": header must start with 'lang' followed by feature names");
            }
            for (std::size_t j = 1; j < cells.size(); ++j) table.feature_names.push_back(detail::trim(cells[j]));
            header = false;
            continue;
        }
        const std::size_t F = table.feature_names.size();
        if (cells.size() != F + 1) {
            throw DataError(std::string{origin} + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(F + 1) + " cells, got " + std::to_string(cells.size()));
        }
        TypologyVector row;
        row.language_id = detail::trim(cells[0]);
        if (row.language_id.empty()) throw DataError(std::string{origin} + ":" + std::to_string(lineno) + ": empty language id");
        if (table.find(row.language_id)) {
            throw DataError(std::string{origin} + ": duplicate language '" + row.language_id + "'");
        }
        row.values.assign(F, 0.0);
        row.missing.assign(F, false);
        for (std::size_t j = 0; j < F; ++j) {
            const auto cell = detail::trim(cells[j + 1]);
            if (cell.empty()) {
                row.missing[j] = true;
                continue;
            }
            double v = 0.0;
            try {
                std::size_t used = 0;
                v = std::stod(cell, &used);
                if (used != cell.size()) throw std::invalid_argument(cell);
            } catch (const std::exception&) {
                throw DataError(std::string{origin} + ": row " + std::to_string(lineno) + ", column '" +
                                table.feature_names[j] + "': not a number: '" + cell + "'");
            }
            if (!(v >= 0.0 && v <= 1.0)) {
                throw DataError(std::string{origin} + ": row " + std::to_string(lineno) + ", column '" +
                                table.feature_names[j] + "': value " + cell + " outside [0,1]");
            }
            row.values[j] = v;
        }
        table.rows.push_back(std::move(row));
    }
    if (header) throw DataError(std::string{origin} + ": missing header");
    return table;
}

inline TypologyTable load_typology(const std::string& path) {
    std::ifstream in{path, std::ios::binary};
    if (!in) throw DataError("cannot open typology file " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return parse_typology(os.str(), path);
}

inline std::string format_typology(const TypologyTable& table) {
    std::ostringstream os;
    os.precision(17);
    os << "lang";
    for (const auto& f : table.feature_names) os << '\t' << f;
    os << '\n';
    for (const auto& r : table.rows) {
        os << r.language_id;
        for (std::size_t j = 0; j < r.values.size(); ++j) {
            os << '\t';
            if (!r.missing[j]) os << r.values[j];
        }
        os << '\n';
    }
    return os.str();
}

struct DistanceMatrix {
    std::vector<std::string> ids;
    Eigen::MatrixXd d;

    [[nodiscard]] std::size_t index_of(std::string_view id) const {
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] == id) return i;
        }
        throw DataError("distance matrix has no language '" + std::string{id} + "'");
    }
};

/// Square TSV: header `lang<TAB>id...`, then one row per id in the same order.
inline DistanceMatrix parse_distance_matrix(std::string_view text) {
    DistanceMatrix m;
    std::istringstream in{std::string{text}};
    std::string line;
    std::vector<std::vector<double>> rows;
    bool header = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = detail::split(line, '\t');
        if (header) {
            for (std::size_t j = 1; j < cells.size(); ++j) m.ids.push_back(detail::trim(cells[j]));
            header = false;
            continue;
        }
        if (cells.size() != m.ids.size() + 1) throw DataError("distance matrix: ragged row");
        if (detail::trim(cells[0]) != m.ids[rows.size()]) throw DataError("distance matrix: row order must match header");
        std::vector<double> r;
        for (std::size_t j = 1; j < cells.size(); ++j) r.push_back(KeyValueConfig::to_double("distance", detail::trim(cells[j])));
        rows.push_back(std::move(r));
    }
    if (rows.size() != m.ids.size()) throw DataError("distance matrix is not square");
    m.d.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < rows.size(); ++j) m.d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
    return m;
}

inline DistanceMatrix load_distance_matrix(const std::string& path) {
    std::ifstream in{path, std::ios::binary};
    if (!in) throw DataError("cannot open distance matrix " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return parse_distance_matrix(os.str());
}

inline constexpr double kImputationEpsilon = 1e-6;

/// Fills each missing cell with the inverse-distance weighted mean
/// sum(w_j v_j) / sum(w_j), w_j = 1 / (d_j + 1e-6), over the `k` nearest
/// languages that have the feature. Only originally present values are used
/// as neighbours. Ties in distance are broken by table order.
inline TypologyTable impute_missing(const TypologyTable& table, const DistanceMatrix& distances, std::size_t k = 10) {
    const auto n = static_cast<Eigen::Index>(distances.ids.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        if (distances.d(i, i) != 0.0) throw DataError("distance matrix diagonal must be zero");
        for (Eigen::Index j = 0; j < n; ++j) {
            if (distances.d(i, j) != distances.d(j, i)) throw DataError("distance matrix must be symmetric");
            if (distances.d(i, j) < 0.0) throw DataError("distances must be non-negative");
        }
    }
    std::vector<std::size_t> row_to_dist;
    for (const auto& r : table.rows) row_to_dist.push_back(distances.index_of(r.language_id));

    TypologyTable out = table;
    const std::size_t F = table.feature_count();
    for (std::size_t f = 0; f < F; ++f) {
        const bool any_present =
            std::any_of(table.rows.begin(), table.rows.end(), [f](const TypologyVector& r) { return !r.missing[f]; });
        const bool any_missing =
            std::any_of(table.rows.begin(), table.rows.end(), [f](const TypologyVector& r) { return r.missing[f]; });
        if (!any_missing) continue;
        if (!any_present) throw DataError("feature '" + table.feature_names[f] + "' is missing in every language");
    }
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        for (std::size_t f = 0; f < F; ++f) {
            if (!table.rows[i].missing[f]) continue;
            std::vector<std::size_t> donors;
            for (std::size_t j = 0; j < table.rows.size(); ++j) {
                if (j != i && !table.rows[j].missing[f]) donors.push_back(j);
            }
            const auto di = static_cast<Eigen::Index>(row_to_dist[i]);
            std::stable_sort(donors.begin(), donors.end(), [&](std::size_t a, std::size_t b) {
                return distances.d(di, static_cast<Eigen::Index>(row_to_dist[a])) <
                       distances.d(di, static_cast<Eigen::Index>(row_to_dist[b]));
            });
            if (donors.size() > k) donors.resize(k);
            double num = 0.0, den = 0.0;
            for (auto j : donors) {
                const double w = 1.0 / (distances.d(di, static_cast<Eigen::Index>(row_to_dist[j])) + kImputationEpsilon);
                num += w * table.rows[j].values[f];
                den += w;
            }
            out.rows[i].values[f] = num / den;
            out.rows[i].missing[f] = false;
        }
    }
    return out;
}

/// f(t) = ReLU(W t + b) with W of shape r x F.
struct TypologyEncoder {
    Eigen::MatrixXd weight;
    Eigen::VectorXd bias;

    [[nodiscard]] std::size_t bottleneck() const noexcept { return static_cast<std::size_t>(bias.size()); }
    [[nodiscard]] std::size_t features() const noexcept { return static_cast<std::size_t>(weight.cols()); }

    /// Uniform in +-sqrt(6 / (r + F)) for both W and b.
    static TypologyEncoder random(std::size_t r, std::size_t F, Rng& rng) {
        if (r < 1) throw ConfigError("encoder bottleneck must be >= 1");
        TypologyEncoder e;
        const double a = std::sqrt(6.0 / static_cast<double>(r + F));
        e.weight.resize(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(F));
        e.bias.resize(static_cast<Eigen::Index>(r));
        for (Eigen::Index i = 0; i < e.weight.rows(); ++i) {
            for (Eigen::Index j = 0; j < e.weight.cols(); ++j) e.weight(i, j) = rng.uniform(-a, a);
        }
        for (Eigen::Index i = 0; i < e.bias.size(); ++i) e.bias(i) = rng.uniform(-a, a);
        return e;
    }
};

template <class WeightMatrix, class BiasVector>
Eigen::VectorXd encode_typology(const WeightMatrix& weight, const BiasVector& bias, std::span<const double> t) {
    if (static_cast<std::size_t>(weight.cols()) != t.size() || weight.rows() != bias.size()) {
        throw std::invalid_argument("encode_typology: dimension mismatch");
    }
    const Eigen::Map<const Eigen::VectorXd> tv{t.data(), static_cast<Eigen::Index>(t.size())};
    Eigen::VectorXd pre = weight * tv + bias;
    return pre.cwiseMax(0.0);
}

inline Eigen::VectorXd encode_typology(const TypologyEncoder& enc, const TypologyVector& t) {
    if (!t.complete()) throw DataError("typology vector for '" + t.language_id + "' has missing values");
    return encode_typology(enc.weight, enc.bias, std::span<const double>{t.values});
}

}  // namespace uplm
