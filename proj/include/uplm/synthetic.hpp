#pragma once

// Synthetic language families for desk-scale experiments. All languages share
// one order-k character Markov chain; each binary flag names a perturbation
// that rewrites a fixed set of its rows. A language's typology vector is the
// list of its flags, so conditioning sees exactly what changed.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "uplm/config.hpp"
#include "uplm/corpus.hpp"
#include "uplm/errors.hpp"
#include "uplm/rng.hpp"
#include "uplm/typology.hpp"

namespace uplm {

/// Key-value schema (all optional):
///   alphabet           = abcdefghijkl     characters of the backbone
///   include_space      = true             adds ' ' to the alphabet
///   order              = 2                context length k
///   branching          = 3                successors per context row
///   languages          = 10
///   sentences          = 2000             per language
///   length_min/max     = 12 / 30          characters per sentence
///   perturbations      = 3                number of flags
///   perturbed_contexts = 40               rows rewritten by each flag
///   strength           = 0.8              mixing weight of the rewritten row
///   private_contexts   = 0                unflagged rows rewritten per language
///   flags              = 010,110,...      explicit per-language flags; random otherwise
///   seed               = 0
struct FamilySpec {
    std::u32string alphabet{U"abcdefghijkl"};
    bool include_space{true};
    std::size_t order{2};
    std::size_t branching{3};
    std::size_t languages{10};
    std::size_t sentences{2000};
    std::size_t length_min{12};
    std::size_t length_max{30};
    std::size_t perturbations{3};
    std::size_t perturbed_contexts{40};
    double strength{0.8};
    /// An active perturbation also multiplies the probability of `tilt_symbols`
    /// symbols by (1 + tilt) in every context, shifting the unigram distribution.
    double tilt{0.0};
    std::size_t tilt_symbols{2};
    std::size_t private_contexts{0};
    std::vector<std::string> flags;
    std::uint64_t seed{0};

    [[nodiscard]] std::u32string symbols() const {
        std::u32string s = alphabet;
        if (include_space && s.find(U' ') == std::u32string::npos) s.push_back(U' ');
        return s;
    }

    void validate() const {
        const auto syms = symbols();
        if (syms.empty()) throw ConfigError("synthetic family: empty alphabet");
        for (std::size_t i = 0; i < syms.size(); ++i) {
            for (std::size_t j = i + 1; j < syms.size(); ++j) {
                if (syms[i] == syms[j]) throw ConfigError("synthetic family: repeated alphabet character");
            }
        }
        if (order < 1) throw ConfigError("synthetic family: order must be >= 1");
        if (branching < 1) throw ConfigError("synthetic family: branching must be >= 1");
        if (languages < 1) throw ConfigError("synthetic family: need at least one language");
        if (languages > 100) throw ConfigError("synthetic family: at most 100 languages");
        if (length_min < 1 || length_max < length_min) throw ConfigError("synthetic family: bad sentence length range");
        if (strength < 0.0 || strength > 1.0) throw ConfigError("synthetic family: strength must lie in [0,1]");
        if (tilt < 0.0) throw ConfigError("synthetic family: tilt must be >= 0");
        if (tilt_symbols > syms.size()) throw ConfigError("synthetic family: more tilt symbols than symbols");
        if (!flags.empty()) {
            if (flags.size() != languages) throw ConfigError("synthetic family: need one flag string per language");
            for (const auto& f : flags) {
                if (f.size() != perturbations || f.find_first_not_of("01") != std::string::npos) {
                    throw ConfigError("synthetic family: flag string '" + f + "' must have " +
                                      std::to_string(perturbations) + " digits of 0/1");
                }
            }
        }
    }

    static FamilySpec from_config(const KeyValueConfig& c) {
        FamilySpec s;
        if (c.has("alphabet")) s.alphabet = decode_utf8(c.get_string("alphabet", ""));
        s.include_space = c.get_bool("include_space", s.include_space);
        auto count = [&](const char* key, std::size_t fallback) {
            const auto v = c.get_int(key, static_cast<std::int64_t>(fallback));
            if (v < 0) throw ConfigError(std::string{"synthetic family: "} + key + " must be non-negative");
            return static_cast<std::size_t>(v);
        };
        s.order = count("order", s.order);
        s.branching = count("branching", s.branching);
        s.languages = count("languages", s.languages);
        s.sentences = count("sentences", s.sentences);
        s.length_min = count("length_min", s.length_min);
        s.length_max = count("length_max", s.length_max);
        s.perturbations = count("perturbations", s.perturbations);
        s.perturbed_contexts = count("perturbed_contexts", s.perturbed_contexts);
        s.strength = c.get_double("strength", s.strength);
        s.tilt = c.get_double("tilt", s.tilt);
        s.tilt_symbols = count("tilt_symbols", s.tilt_symbols);
        s.private_contexts = count("private_contexts", s.private_contexts);
        s.flags = c.get_list("flags");
        s.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
        s.validate();
        return s;
    }

    [[nodiscard]] KeyValueConfig to_config() const {
        KeyValueConfig c;
        c.set("alphabet", encode_utf8(alphabet));
        c.set("include_space", include_space ? "true" : "false");
        c.set("order", std::to_string(order));
        c.set("branching", std::to_string(branching));
        c.set("languages", std::to_string(languages));
        c.set("sentences", std::to_string(sentences));
        c.set("length_min", std::to_string(length_min));
        c.set("length_max", std::to_string(length_max));
        c.set("perturbations", std::to_string(perturbations));
        c.set("perturbed_contexts", std::to_string(perturbed_contexts));
        std::ostringstream st;
        st.precision(17);
        st << strength;
        c.set("strength", st.str());
        std::ostringstream tt;
        tt.precision(17);
        tt << tilt;
        c.set("tilt", tt.str());
        c.set("tilt_symbols", std::to_string(tilt_symbols));
        c.set("private_contexts", std::to_string(private_contexts));
        std::string f;
        for (std::size_t i = 0; i < flags.size(); ++i) f += (i ? "," : "") + flags[i];
        c.set("flags", f);
        c.set("seed", std::to_string(seed));
        return c;
    }
};

inline std::string synthetic_language_id(std::size_t i) {
    std::string id = "s00";
    id[1] = static_cast<char>('0' + (i / 10) % 10);
    id[2] = static_cast<char>('0' + i % 10);
    return id;
}

struct SyntheticFamily {
    std::vector<RawDataset> languages;
    TypologyTable typology;
};

namespace detail {

/// Rows of an order-k chain over A symbols plus a start marker (index A).
class MarkovChain {
public:
    MarkovChain(std::size_t symbols, std::size_t order)
        : A_{symbols}, k_{order}, rows_(ipow(symbols + 1, order), std::vector<double>(symbols, 0.0)) {}

    [[nodiscard]] std::size_t contexts() const noexcept { return rows_.size(); }
    [[nodiscard]] std::size_t symbols() const noexcept { return A_; }
    std::vector<double>& row(std::size_t ctx) { return rows_[ctx]; }
    [[nodiscard]] const std::vector<double>& row(std::size_t ctx) const { return rows_[ctx]; }

    [[nodiscard]] std::size_t start() const noexcept { return rows_.size() - 1; }
    [[nodiscard]] std::size_t advance(std::size_t ctx, std::size_t symbol) const noexcept {
        return (ctx * (A_ + 1) + symbol) % rows_.size();
    }

    std::size_t draw(std::size_t ctx, Rng& rng) const {
        const auto& r = rows_[ctx];
        const double u = rng.uniform();
        double acc = 0.0;
        std::size_t last = 0;
        for (std::size_t s = 0; s < A_; ++s) {
            if (r[s] <= 0.0) continue;
            acc += r[s];
            last = s;
            if (u < acc) return s;
        }
        return last;
    }

private:
    static std::size_t ipow(std::size_t b, std::size_t e) {
        std::size_t r = 1;
        for (std::size_t i = 0; i < e; ++i) r *= b;
        return r;
    }

    std::size_t A_;
    std::size_t k_;
    std::vector<std::vector<double>> rows_;
};

/// A sparse random distribution: `branching` distinct successors with weights
/// bounded away from zero.
inline std::vector<double> random_row(std::size_t A, std::size_t branching, Rng& rng) {
    std::vector<std::size_t> idx(A);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(std::span{idx});
    std::vector<double> row(A, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < std::min(branching, A); ++i) {
        const double w = rng.uniform(0.2, 1.0);
        row[idx[i]] = w;
        total += w;
    }
    for (double& x : row) x /= total;
    return row;
}

inline void mix_row(std::vector<double>& row, const std::vector<double>& alt, double s) {
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = (1.0 - s) * row[i] + s * alt[i];
}

inline std::vector<std::size_t> pick_contexts(std::size_t total, std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(total);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(std::span{idx});
    idx.resize(std::min(n, total));
    return idx;
}

}  // namespace detail

inline SyntheticFamily generate_synthetic_family(const FamilySpec& spec) {
    spec.validate();
    const auto syms = spec.symbols();
    const std::size_t A = syms.size();
    auto root = Rng::stream(spec.seed, "synthetic");

    detail::MarkovChain base{A, spec.order};
    {
        auto rng = root.split("backbone");
        for (std::size_t c = 0; c < base.contexts(); ++c) base.row(c) = detail::random_row(A, spec.branching, rng);
    }

    struct Perturbation {
        std::vector<std::size_t> contexts;
        std::vector<std::vector<double>> rows;
        std::vector<std::size_t> favored;
    };
    std::vector<Perturbation> perturbations(spec.perturbations);
    for (std::size_t p = 0; p < spec.perturbations; ++p) {
        auto rng = root.split("perturbation").split(p);
        perturbations[p].contexts = detail::pick_contexts(base.contexts(), spec.perturbed_contexts, rng);
        for (std::size_t i = 0; i < perturbations[p].contexts.size(); ++i) {
            perturbations[p].rows.push_back(detail::random_row(A, spec.branching, rng));
        }
        // Own stream, so tilt-free families are unchanged by its presence.
        auto trng = root.split("tilt").split(p);
        perturbations[p].favored = detail::pick_contexts(A, spec.tilt_symbols, trng);
    }

    std::vector<std::string> flags = spec.flags;
    if (flags.empty()) {
        auto rng = root.split("flags");
        for (std::size_t l = 0; l < spec.languages; ++l) {
            std::string f(spec.perturbations, '0');
            for (auto& ch : f) ch = rng.bernoulli(0.5) ? '1' : '0';
            flags.push_back(std::move(f));
        }
    }

    SyntheticFamily family;
    for (std::size_t p = 0; p < spec.perturbations; ++p) family.typology.feature_names.push_back("p" + std::to_string(p));
    for (std::size_t l = 0; l < spec.languages; ++l) {
        const auto id = synthetic_language_id(l);
        detail::MarkovChain chain = base;
        TypologyVector tv{id, std::vector<double>(spec.perturbations, 0.0), std::vector<bool>(spec.perturbations, false)};
        for (std::size_t p = 0; p < spec.perturbations; ++p) {
            if (flags[l][p] != '1') continue;
            tv.values[p] = 1.0;
            for (std::size_t i = 0; i < perturbations[p].contexts.size(); ++i) {
                detail::mix_row(chain.row(perturbations[p].contexts[i]), perturbations[p].rows[i], spec.strength);
            }
            if (spec.tilt > 0.0) {
                for (std::size_t c = 0; c < chain.contexts(); ++c) {
                    auto& row = chain.row(c);
                    for (auto k : perturbations[p].favored) row[k] *= 1.0 + spec.tilt;
                    double z = 0.0;
                    for (double v : row) z += v;
                    for (double& v : row) v /= z;
                }
            }
        }
        if (spec.private_contexts > 0) {
            auto rng = root.split("private").split(l);
            for (auto c : detail::pick_contexts(base.contexts(), spec.private_contexts, rng)) {
                detail::mix_row(chain.row(c), detail::random_row(A, spec.branching, rng), spec.strength);
            }
        }
        family.typology.rows.push_back(std::move(tv));

        RawDataset raw{id, {}};
        auto rng = root.split("text").split(l);
        for (std::size_t s = 0; s < spec.sentences; ++s) {
            const auto len = spec.length_min + rng.below(spec.length_max - spec.length_min + 1);
            std::u32string sentence;
            std::size_t ctx = chain.start();
            for (std::size_t i = 0; i < len; ++i) {
                const auto sym = chain.draw(ctx, rng);
                sentence.push_back(syms[sym]);
                ctx = chain.advance(ctx, sym);
            }
            raw.sentences.push_back(std::move(sentence));
        }
        family.languages.push_back(std::move(raw));
    }
    return family;
}

/// Writes `<dir>/corpus/<id>.txt` per language and `<dir>/typology.tsv`.
inline void write_synthetic_family(const SyntheticFamily& family, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "corpus");
    for (const auto& raw : family.languages) {
        std::ofstream out{dir / "corpus" / (raw.language_id + ".txt"), std::ios::binary};
        if (!out) throw DataError("cannot write corpus file for " + raw.language_id);
        for (const auto& s : raw.sentences) out << encode_utf8(s) << '\n';
    }
    std::ofstream typ{dir / "typology.tsv", std::ios::binary};
    if (!typ) throw DataError("cannot write " + (dir / "typology.tsv").string());
    typ << format_typology(family.typology);
}

}  // namespace uplm
