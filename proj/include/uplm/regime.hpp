#pragma once

// Zero-shot, few-shot and joint experiments over partitions of held-out
// languages.

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "uplm/config.hpp"
#include "uplm/corpus.hpp"
#include "uplm/evaluation.hpp"
#include "uplm/laplace.hpp"
#include "uplm/model.hpp"
#include "uplm/training.hpp"
#include "uplm/typology.hpp"

namespace uplm {

enum class Regime { zero_shot, few_shot, joint };

inline std::string to_string(Regime r) {
    switch (r) {
        case Regime::zero_shot: return "ZERO_SHOT";
        case Regime::few_shot: return "FEW_SHOT";
        case Regime::joint: return "JOINT";
    }
    return {};
}

inline Regime parse_regime(std::string_view s) {
    std::string u{s};
    for (auto& ch : u) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    std::replace(u.begin(), u.end(), '-', '_');
    if (u == "ZERO_SHOT") return Regime::zero_shot;
    if (u == "FEW_SHOT") return Regime::few_shot;
    if (u == "JOINT") return Regime::joint;
    throw ConfigError("unknown regime '" + std::string{s} + "' (expected zero_shot, few_shot or joint)");
}

/// Key-value schema:
///   regimes          = zero_shot,few_shot,joint
///   partitions       = s08,s09;s06,s07      held-out sets separated by ';'
///   dev_languages    = 5                    per partition, for the lambda search
///   conditioning     = bare
///   priors           = univ,ninf,fitu
///   fewshot          = 100                  sentences per held-out language
///   univ_lambda_grid = 1e5                  one value disables the search
///   ninf_lambda_grid = 1e-5
///   fisher_prior_variance = 1
///   fisher_max_sequences  = 0               0 uses every training sentence
///   seed             = 0
struct RegimeSpec {
    std::vector<Regime> regimes{Regime::zero_shot};
    std::vector<std::vector<std::string>> partitions;
    std::size_t dev_languages{5};
    Conditioning conditioning{Conditioning::bare};
    std::vector<PriorKind> priors{PriorKind::univ, PriorKind::ninf, PriorKind::fitu};
    std::size_t fewshot{100};
    std::vector<double> univ_lambda_grid{1e5};
    std::vector<double> ninf_lambda_grid{1e-5};
    double fisher_prior_variance{1.0};
    std::size_t fisher_max_sequences{0};
    std::uint64_t seed{0};

    [[nodiscard]] bool has(Regime r) const { return std::find(regimes.begin(), regimes.end(), r) != regimes.end(); }
    [[nodiscard]] bool has(PriorKind p) const { return std::find(priors.begin(), priors.end(), p) != priors.end(); }

    [[nodiscard]] std::vector<double> lambda_grid(PriorKind p) const {
        if (p == PriorKind::univ) return univ_lambda_grid;
        if (p == PriorKind::ninf) return ninf_lambda_grid;
        return {0.0};
    }

    void validate() const {
        if (regimes.empty()) throw ConfigError("regime spec lists no regimes");
        if (partitions.empty()) throw ConfigError("regime spec has no partitions");
        std::set<std::string> seen;
        for (const auto& p : partitions) {
            if (p.empty()) throw ConfigError("regime spec has an empty partition");
            for (const auto& id : p) {
                if (!seen.insert(id).second) throw ConfigError("language '" + id + "' appears in two partitions");
            }
        }
        if (dev_languages < 1) throw ConfigError("dev_languages must be >= 1");
        if (univ_lambda_grid.empty() || ninf_lambda_grid.empty()) throw ConfigError("lambda grids must not be empty");
        for (double l : univ_lambda_grid) {
            if (l < 0.0) throw ConfigError("lambda values must be >= 0");
        }
        for (double l : ninf_lambda_grid) {
            if (l < 0.0) throw ConfigError("lambda values must be >= 0");
        }
        if (!(fisher_prior_variance > 0.0)) throw ConfigError("fisher_prior_variance must be positive");
    }

    static RegimeSpec from_config(const KeyValueConfig& c) {
        RegimeSpec s;
        if (c.has("regimes")) {
            s.regimes.clear();
            for (const auto& r : c.get_list("regimes")) s.regimes.push_back(parse_regime(r));
        }
        for (const auto& group : detail::split(c.get_string("partitions", ""), ';')) {
            std::vector<std::string> ids;
            for (const auto& id : detail::split(group, ',')) {
                auto t = detail::trim(id);
                if (!t.empty()) ids.push_back(std::move(t));
            }
            if (!ids.empty()) s.partitions.push_back(std::move(ids));
        }
        s.dev_languages = static_cast<std::size_t>(std::max<std::int64_t>(0, c.get_int("dev_languages", 5)));
        s.conditioning = parse_conditioning(c.get_string("conditioning", "bare"));
        if (c.has("priors")) {
            s.priors.clear();
            for (const auto& p : c.get_list("priors")) s.priors.push_back(parse_prior(p));
        }
        const auto fs = c.get_int("fewshot", 100);
        if (fs < 0) throw ConfigError("fewshot must be >= 0");
        s.fewshot = static_cast<std::size_t>(fs);
        if (c.has("univ_lambda_grid")) s.univ_lambda_grid = c.get_double_list("univ_lambda_grid");
        if (c.has("ninf_lambda_grid")) s.ninf_lambda_grid = c.get_double_list("ninf_lambda_grid");
        s.fisher_prior_variance = c.get_double("fisher_prior_variance", 1.0);
        s.fisher_max_sequences = static_cast<std::size_t>(std::max<std::int64_t>(0, c.get_int("fisher_max_sequences", 0)));
        s.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
        s.validate();
        return s;
    }
};

/// Everything a regime reads: split datasets over one shared vocabulary and,
/// for conditioned models, a complete typology table.
struct ExperimentData {
    CharVocabulary vocab;
    std::vector<LanguageDataset> datasets;
    std::optional<TypologyTable> typology;

    [[nodiscard]] const LanguageDataset& dataset(std::string_view id) const {
        for (const auto& d : datasets) {
            if (d.language_id == id) return d;
        }
        throw DataError("unknown language '" + std::string{id} + "'");
    }

    [[nodiscard]] std::vector<double> typology_for(std::string_view id, Conditioning c) const {
        if (c == Conditioning::bare) return {};
        if (!typology) throw DataError(to_string(c) + " needs a typology table");
        const auto& row = typology->at(id);
        if (!row.complete()) throw DataError("typology vector for '" + row.language_id + "' has missing values; impute first");
        return row.values;
    }
};

struct RegimeConfigs {
    ArchConfig arch;
    TrainConfig train;
    TrainConfig fewshot;
};

struct RegimeOutput {
    ResultTable table;
    /// One per partition, in partition order (zero- and few-shot regimes).
    std::vector<LaplacePosterior> posteriors;
    std::optional<ModelParameters> joint_model;
    /// Selected lambda per (partition index, prior).
    std::map<std::pair<std::size_t, std::string>, double> chosen_lambda;
};

using ProgressFn = std::function<void(const std::string&)>;

namespace detail {

inline ArchConfig conditioned_arch(ArchConfig a, const ExperimentData& data, Conditioning c) {
    a.vocab_size = data.vocab.size();
    a.conditioning = c;
    if (c != Conditioning::bare) {
        if (!data.typology) throw DataError(to_string(c) + " needs a typology table");
        a.typology_dim = data.typology->feature_count();
        if (a.bottleneck == 0) a.bottleneck = std::max<std::size_t>(1, std::min<std::size_t>(8, a.typology_dim));
    } else {
        a.typology_dim = 0;
        a.bottleneck = 0;
    }
    a.validate();
    return a;
}

inline std::vector<TrainingLanguage> training_languages(const ExperimentData& data, const std::vector<std::string>& ids,
                                                        Conditioning c) {
    std::vector<TrainingLanguage> out;
    for (const auto& id : ids) {
        const auto& d = data.dataset(id);
        out.push_back({id, d.train, d.dev, data.typology_for(id, c)});
    }
    return out;
}

}  // namespace detail

/// Fine-tuned (or, with an empty sample, zero-shot) parameters for one language.
inline ModelParameters fewshot_parameters(const ArchConfig& arch, const ExperimentData& data, const std::string& id,
                                          PriorKind prior, double lambda, const LaplacePosterior* post,
                                          const TrainConfig& cfg, std::size_t budget, std::uint64_t seed) {
    const auto& d = data.dataset(id);
    const auto sample = sample_fewshot(d, budget, seed);
    if (sample.empty()) return zero_shot_parameters(prior, post, arch, seed);
    // Fixed epochs: the held-out language's dev split stays unseen.
    TrainingLanguage lang{id, sample, {}, data.typology_for(id, arch.conditioning)};
    FinetuneConfig ft{prior, lambda, post, nullptr};
    TrainConfig c = cfg;
    c.seed = seed;
    return finetune(arch, lang, ft, c).params;
}

inline RegimeOutput run_regime(const RegimeSpec& spec, const ExperimentData& data, const RegimeConfigs& configs,
                               const ProgressFn& progress = {}) {
    spec.validate();
    auto say = [&](const std::string& m) {
        if (progress) progress(m);
    };
    for (const auto& part : spec.partitions) {
        for (const auto& id : part) (void)data.dataset(id);
    }
    const ArchConfig arch = detail::conditioned_arch(configs.arch, data, spec.conditioning);
    const std::string cond = to_string(spec.conditioning);
    TrainConfig train_cfg = configs.train;
    train_cfg.seed = spec.seed;

    RegimeOutput out;
    std::vector<std::string> all_ids;
    for (const auto& d : data.datasets) all_ids.push_back(d.language_id);

    if (spec.has(Regime::zero_shot) || spec.has(Regime::few_shot)) {
        for (std::size_t pi = 0; pi < spec.partitions.size(); ++pi) {
            const auto& held = spec.partitions[pi];
            std::vector<std::string> train_ids;
            for (const auto& id : all_ids) {
                if (std::find(held.begin(), held.end(), id) == held.end()) train_ids.push_back(id);
            }
            if (train_ids.empty()) throw ConfigError("partition " + std::to_string(pi) + " leaves no training languages");
            say("partition " + std::to_string(pi) + ": training on " + std::to_string(train_ids.size()) + " languages");
            const auto langs = detail::training_languages(data, train_ids, spec.conditioning);
            const auto trained = train_mle(arch, langs, train_cfg);

            std::vector<FisherLanguage> fl;
            for (const auto& l : langs) fl.push_back({l.language_id, l.train, l.typology});
            say("partition " + std::to_string(pi) + ": Fisher diagonal");
            const auto f = fisher_diagonal(trained.params, fl, FisherOptions{spec.fisher_max_sequences, spec.seed});
            auto post = assemble_posterior(trained.params, f, spec.fisher_prior_variance);

            for (const auto& id : held) {
                const auto& d = data.dataset(id);
                const auto t = data.typology_for(id, spec.conditioning);
                if (spec.has(Regime::zero_shot)) {
                    for (auto prior : spec.priors) {
                        if (prior == PriorKind::fitu) continue;
                        const auto p = zero_shot_parameters(prior, &post, arch, spec.seed);
                        out.table.add({id, to_string(Regime::zero_shot), to_string(prior), cond, bpc(p, d.test, t)});
                    }
                }
            }

            if (spec.has(Regime::few_shot)) {
                // Lambda search on the dev splits of a seeded subset of the held-out languages.
                std::vector<std::string> dev_ids = held;
                auto rng = Rng::stream(spec.seed, "dev-languages").split(pi);
                rng.shuffle(std::span{dev_ids});
                dev_ids.resize(std::min(spec.dev_languages, dev_ids.size()));
                std::sort(dev_ids.begin(), dev_ids.end());
                for (auto prior : spec.priors) {
                    const auto grid = spec.lambda_grid(prior);
                    double best = grid.front();
                    if (grid.size() > 1) {
                        double best_bpc = std::numeric_limits<double>::infinity();
                        for (double lambda : grid) {
                            double sum = 0.0;
                            for (const auto& id : dev_ids) {
                                const auto p = fewshot_parameters(arch, data, id, prior, lambda, &post, configs.fewshot,
                                                                  spec.fewshot, spec.seed);
                                sum += bpc(p, data.dataset(id).dev, data.typology_for(id, spec.conditioning));
                            }
                            const double mean = sum / static_cast<double>(dev_ids.size());
                            say("partition " + std::to_string(pi) + ": " + to_string(prior) + " lambda " +
                                std::to_string(lambda) + " dev BPC " + std::to_string(mean));
                            if (mean < best_bpc) best_bpc = mean, best = lambda;
                        }
                    }
                    out.chosen_lambda[{pi, to_string(prior)}] = best;
                    for (const auto& id : held) {
                        const auto p = fewshot_parameters(arch, data, id, prior, best, &post, configs.fewshot, spec.fewshot,
                                                          spec.seed);
                        out.table.add({id, to_string(Regime::few_shot), to_string(prior), cond,
                                       bpc(p, data.dataset(id).test, data.typology_for(id, spec.conditioning))});
                    }
                }
            }
            out.posteriors.push_back(std::move(post));
        }
    }

    if (spec.has(Regime::joint)) {
        say("joint: training on " + std::to_string(all_ids.size()) + " languages");
        const auto langs = detail::training_languages(data, all_ids, spec.conditioning);
        auto trained = train_mle(arch, langs, train_cfg);
        for (const auto& part : spec.partitions) {
            for (const auto& id : part) {
                out.table.add({id, to_string(Regime::joint), "-", cond,
                               bpc(trained.params, data.dataset(id).test, data.typology_for(id, spec.conditioning))});
            }
        }
        out.joint_model = std::move(trained.params);
    }
    out.table.add_aggregates();
    return out;
}

}  // namespace uplm
