#pragma once

// MAP training on the training languages and the three fine-tuning
// objectives for a held-out language.
//
// Everything here minimizes a per-character loss: the summed negative
// log-likelihood plus a penalty, divided by the number of predicted training
// characters N. A minibatch estimates the NLL part by its own mean.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "uplm/config.hpp"
#include "uplm/corpus.hpp"
#include "uplm/errors.hpp"
#include "uplm/evaluation.hpp"
#include "uplm/laplace.hpp"
#include "uplm/model.hpp"
#include "uplm/numerics.hpp"

namespace uplm {

/// base_lr / factor^floor(3 epoch / total): three equal phases.
inline double lr_schedule(std::size_t epoch, std::size_t total_epochs, double base_lr, double factor) {
    if (total_epochs == 0 || epoch >= total_epochs) throw std::invalid_argument("lr_schedule: epoch out of range");
    if (!(base_lr > 0.0) || !(factor > 0.0)) throw ConfigError("learning rate and decay factor must be positive");
    return base_lr / std::pow(factor, static_cast<double>((3 * epoch) / total_epochs));
}

struct TrainConfig {
    std::size_t max_epochs{6};
    double base_lr{1e-4};
    double lr_decay_factor{10.0};
    bool early_stopping{true};
    std::size_t patience{2};
    double clip_norm{5.0};
    /// Variance of the Gaussian weight prior in MLE training; 0 disables it.
    double prior_variance{1.0};
    BatchConfig batch{};
    DropoutConfig dropout{};
    std::uint64_t seed{0};

    /// Training on the training languages: 6 epochs from 1e-4.
    static TrainConfig paper() { return {}; }
    /// Few-shot fine-tuning: 25 epochs.
    static TrainConfig paper_fewshot() {
        TrainConfig c;
        c.max_epochs = 25;
        return c;
    }
    /// The desk model sees ~40x fewer characters than the full corpus, so it
    /// uses smaller batches and a larger rate to converge within 6 epochs.
    static TrainConfig desk() {
        TrainConfig c;
        c.base_lr = 5e-3;
        c.batch.batch_size = 32;
        return c;
    }
    /// 25 full-batch steps on 100 sentences; 3e-2 is large enough for the
    /// unregularized fit to move away from w*.
    static TrainConfig desk_fewshot() {
        TrainConfig c;
        c.max_epochs = 25;
        c.base_lr = 3e-2;
        return c;
    }

    void validate() const {
        if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
        if (!(lr_decay_factor > 0.0)) throw ConfigError("lr_decay_factor must be positive");
        if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
        if (prior_variance < 0.0) throw ConfigError("prior_variance must be >= 0");
        batch.validate();
        for (double k : {dropout.embedding_keep, dropout.hidden_keep, dropout.output_keep, dropout.dropconnect_keep}) {
            if (!(k > 0.0 && k <= 1.0)) throw ConfigError("dropout keep probabilities must lie in (0, 1]");
        }
    }

    /// Reads `<prefix>key` entries, e.g. prefix "fewshot." for the fine-tuning loop.
    static TrainConfig from_config(const KeyValueConfig& c, TrainConfig base, const std::string& prefix = "") {
        auto key = [&](const char* k) { return prefix + k; };
        auto count = [&](const char* k, std::size_t fallback) {
            const auto v = c.get_int(key(k), static_cast<std::int64_t>(fallback));
            if (v < 0) throw ConfigError("config key '" + key(k) + "' must be non-negative");
            return static_cast<std::size_t>(v);
        };
        base.max_epochs = count("max_epochs", base.max_epochs);
        base.base_lr = c.get_double(key("base_lr"), base.base_lr);
        base.lr_decay_factor = c.get_double(key("lr_decay_factor"), base.lr_decay_factor);
        base.early_stopping = c.get_bool(key("early_stopping"), base.early_stopping);
        base.patience = count("patience", base.patience);
        base.clip_norm = c.get_double(key("clip_norm"), base.clip_norm);
        base.prior_variance = c.get_double(key("prior_variance"), base.prior_variance);
        base.batch.batch_size = count("batch_size", base.batch.batch_size);
        base.batch.length_mean = c.get_double(key("length_mean"), base.batch.length_mean);
        base.batch.length_std = c.get_double(key("length_std"), base.batch.length_std);
        base.dropout.embedding_keep = c.get_double(key("keep_embedding"), base.dropout.embedding_keep);
        base.dropout.hidden_keep = c.get_double(key("keep_hidden"), base.dropout.hidden_keep);
        base.dropout.output_keep = c.get_double(key("keep_output"), base.dropout.output_keep);
        base.dropout.dropconnect_keep = c.get_double(key("keep_dropconnect"), base.dropout.dropconnect_keep);
        base.validate();
        return base;
    }
    static TrainConfig from_config(const KeyValueConfig& c) { return from_config(c, TrainConfig{}); }

    [[nodiscard]] KeyValueConfig to_config(const std::string& prefix = "") const {
        KeyValueConfig c;
        auto num = [](double v) {
            std::ostringstream os;
            os.precision(17);
            os << v;
            return os.str();
        };
        c.set(prefix + "max_epochs", std::to_string(max_epochs));
        c.set(prefix + "base_lr", num(base_lr));
        c.set(prefix + "lr_decay_factor", num(lr_decay_factor));
        c.set(prefix + "early_stopping", early_stopping ? "true" : "false");
        c.set(prefix + "patience", std::to_string(patience));
        c.set(prefix + "clip_norm", num(clip_norm));
        c.set(prefix + "prior_variance", num(prior_variance));
        c.set(prefix + "batch_size", std::to_string(batch.batch_size));
        c.set(prefix + "length_mean", num(batch.length_mean));
        c.set(prefix + "length_std", num(batch.length_std));
        c.set(prefix + "keep_embedding", num(dropout.embedding_keep));
        c.set(prefix + "keep_hidden", num(dropout.hidden_keep));
        c.set(prefix + "keep_output", num(dropout.output_keep));
        c.set(prefix + "keep_dropconnect", num(dropout.dropconnect_keep));
        return c;
    }
};

/// One language as seen by a training loop. `dev` may be empty.
struct TrainingLanguage {
    std::string language_id;
    std::span<const Sentence> train;
    std::span<const Sentence> dev;
    std::vector<double> typology;
};

struct LogRow {
    std::size_t epoch{0};
    std::string split;
    std::string language;
    double bpc{0.0};
    double lr{0.0};
};

struct TrainLog {
    std::vector<LogRow> rows;

    [[nodiscard]] std::string to_tsv() const {
        std::ostringstream os;
        os.precision(17);
        os << "epoch\tsplit\tlanguage\tbpc\tlr\n";
        for (const auto& r : rows) os << r.epoch << '\t' << r.split << '\t' << r.language << '\t' << r.bpc << '\t' << r.lr << '\n';
        return os.str();
    }
};

struct TrainResult {
    ModelParameters params;
    TrainLog log;
    std::size_t epochs_run{0};
    /// Epoch whose parameters were returned; nullopt when none ran.
    std::optional<std::size_t> best_epoch;
    double best_dev_bpc{std::numeric_limits<double>::infinity()};
};

/// value(w) of a penalty; adds d/dw into `grad`.
using Penalty = std::function<double(std::span<const double> w, std::span<double> grad)>;

namespace detail {

inline std::size_t predicted_characters(std::span<const Sentence> sentences) {
    std::size_t n = 0;
    for (const auto& s : sentences) n += s.size() >= 2 ? s.size() - 1 : 0;
    return n;
}

/// Mean dev BPC over the languages that have a dev split; nullopt if none do.
inline std::optional<double> dev_bpc(const ModelParameters& p, std::span<const TrainingLanguage> langs, std::size_t epoch,
                                     double lr, TrainLog& log) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& l : langs) {
        if (l.dev.empty()) continue;
        const double b = bpc(p, l.dev, l.typology);
        log.rows.push_back({epoch, "dev", l.language_id, b, lr});
        sum += b;
        ++n;
    }
    if (n == 0) return std::nullopt;
    const double mean = sum / static_cast<double>(n);
    log.rows.push_back({epoch, "dev", "all", mean, lr});
    return mean;
}

}  // namespace detail

/// Adam over language-proportional batches with per-batch lr
/// schedule(epoch) * lr_scale, global-norm clipping and dev-BPC early stopping.
/// Recurrent state is carried from batch to batch of the same language within
/// an epoch, without gradient flow between batches.
inline TrainResult run_training(ModelParameters init, std::span<const TrainingLanguage> langs, const TrainConfig& cfg,
                                const Penalty& penalty = {}) {
    cfg.validate();
    if (langs.empty()) throw DataError("training needs at least one language");
    std::size_t total_chars = 0;
    std::vector<std::string> ids;
    std::vector<std::vector<Sentence>> train_copies;
    for (const auto& l : langs) {
        if (l.train.empty()) throw DataError("language '" + l.language_id + "' has no training sentences");
        total_chars += detail::predicted_characters(l.train);
        ids.push_back(l.language_id);
        train_copies.emplace_back(l.train.begin(), l.train.end());
    }
    if (total_chars == 0) throw DataError("training data holds no predicted characters");
    const double inv_total = 1.0 / static_cast<double>(total_chars);

    TrainResult result{init, {}, 0, std::nullopt, std::numeric_limits<double>::infinity()};
    ModelParameters& p = init;
    const std::size_t P = p.size();
    auto adam = AdamState::for_parameters(P);
    AlignedVector grad(P);
    std::size_t stale = 0;
    bool have_dev = false;
    for (const auto& l : langs) have_dev = have_dev || !l.dev.empty();

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double lr = lr_schedule(epoch, cfg.max_epochs, cfg.base_lr, cfg.lr_decay_factor);
        std::vector<const std::vector<Sentence>*> data;
        for (const auto& t : train_copies) data.push_back(&t);
        BatchConfig bc = cfg.batch;
        bc.seed = cfg.seed;
        BatchStream stream{ids, data, bc, epoch};
        std::vector<LstmState> states(langs.size());
        std::vector<double> nats(langs.size(), 0.0);
        std::vector<std::size_t> chars(langs.size(), 0);
        const auto drop_rng = Rng::stream(cfg.seed, "dropout").split(epoch);
        std::size_t batch_index = 0;

        while (auto batch = stream.next()) {
            const std::size_t l = batch->language;
            const std::size_t B = batch->rows.size();
            const auto segments = batch->segments();
            std::size_t n_chars = 0;
            for (const auto& s : segments) n_chars += s.predicted();
            if (n_chars == 0) continue;

            auto mask_rng = drop_rng.split(batch_index++);
            const auto plan = DropoutPlan::sample(p.arch, B, cfg.dropout, mask_rng);
            if (states[l].empty()) states[l] = LstmState::zeros(p.arch, cfg.batch.batch_size);
            LstmState state = states[l].columns(B);

            ModelRunner runner{p, langs[l].typology};
            double nll = 0.0;
            for (const auto& seg : segments) nll += runner.accumulate(seg, state, plan, 1.0 / static_cast<double>(n_chars));
            states[l].store_columns(state);
            if (!std::isfinite(nll)) {
                throw NumericError("training diverged: non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch_index - 1) + " (language '" + batch->language_id + "')");
            }
            nats[l] += nll;
            chars[l] += n_chars;

            std::fill(grad.begin(), grad.end(), 0.0);
            runner.add_gradient_to(grad);
            if (penalty) {
                AlignedVector pg(P, 0.0);
                penalty(p.flat.span(), pg);
                for (std::size_t i = 0; i < P; ++i) grad[i] += inv_total * pg[i];
            }
            for (std::size_t i = 0; i < P; ++i) {
                if (!std::isfinite(grad[i])) {
                    throw NumericError("training diverged: non-finite gradient in block " + p.layout.block_of(i).name +
                                       " at epoch " + std::to_string(epoch));
                }
            }
            clip_global_norm(grad, cfg.clip_norm);
            adam_update(adam, p.flat.span(), grad, lr * batch->lr_scale);
        }
        result.epochs_run = epoch + 1;

        double all_nats = 0.0;
        std::size_t all_chars = 0;
        for (std::size_t l = 0; l < langs.size(); ++l) {
            if (chars[l] == 0) continue;
            result.log.rows.push_back({epoch, "train", langs[l].language_id, LogLoss{nats[l], chars[l]}.bpc(), lr});
            all_nats += nats[l];
            all_chars += chars[l];
        }
        if (all_chars > 0) result.log.rows.push_back({epoch, "train", "all", LogLoss{all_nats, all_chars}.bpc(), lr});

        if (!have_dev || !cfg.early_stopping) continue;
        const auto dev = detail::dev_bpc(p, langs, epoch, lr, result.log);
        if (dev && *dev < result.best_dev_bpc) {
            result.best_dev_bpc = *dev;
            result.best_epoch = epoch;
            result.params = p;
            stale = 0;
        } else if (++stale >= cfg.patience) {
            break;
        }
    }
    if (!have_dev || !cfg.early_stopping) {
        result.params = p;
        if (result.epochs_run > 0) result.best_epoch = result.epochs_run - 1;
    }
    return result;
}

/// (1 / (2 sigma^2)) ||w||^2, the negative log of a zero-mean isotropic Gaussian prior up to a constant.
inline Penalty gaussian_prior_penalty(double prior_variance) {
    return [prior_variance](std::span<const double> w, std::span<double> g) {
        double v = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            v += w[i] * w[i];
            g[i] += w[i] / prior_variance;
        }
        return v / (2.0 * prior_variance);
    };
}

/// Minimizes per-character NLL plus the Gaussian prior term over the
/// training languages; returns the best-dev parameters.
inline TrainResult train_mle(const ArchConfig& arch, std::span<const TrainingLanguage> langs, const TrainConfig& cfg) {
    auto init = init_parameters(arch, cfg.seed);
    const Penalty prior = cfg.prior_variance > 0.0 ? gaussian_prior_penalty(cfg.prior_variance) : Penalty{};
    return run_training(std::move(init), langs, cfg, prior);
}

// ---------------------------------------------------------------------------
// Fine-tuning

enum class PriorKind { univ, ninf, fitu };

inline std::string to_string(PriorKind k) {
    switch (k) {
        case PriorKind::univ: return "UNIV";
        case PriorKind::ninf: return "NINF";
        case PriorKind::fitu: return "FITU";
    }
    return {};
}

inline PriorKind parse_prior(std::string_view s) {
    std::string u{s};
    for (auto& ch : u) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    if (u == "UNIV") return PriorKind::univ;
    if (u == "NINF") return PriorKind::ninf;
    if (u == "FITU") return PriorKind::fitu;
    throw ConfigError("unknown objective '" + std::string{s} + "' (expected univ, ninf or fitu)");
}

inline double default_lambda(PriorKind k) {
    switch (k) {
        case PriorKind::univ: return 1e5;
        case PriorKind::ninf: return 1e-5;
        case PriorKind::fitu: return 0.0;
    }
    return 0.0;
}

/// (lambda / 2) sum_i (f_i + 1/sigma^2) (w_i - w*_i)^2.
inline double univ_penalty(std::span<const double> w, const LaplacePosterior& post, double lambda, std::span<double> grad = {}) {
    if (w.size() != post.size()) throw std::invalid_argument("univ_penalty: parameter size mismatch");
    double v = 0.0;
    const double inv_s2 = 1.0 / post.prior_variance;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double prec = post.fisher[i] + inv_s2;
        const double d = w[i] - post.mean[i];
        v += prec * d * d;
        if (!grad.empty()) grad[i] += lambda * prec * d;
    }
    return 0.5 * lambda * v;
}

/// (lambda / 2) ||w||^2.
inline double ninf_penalty(std::span<const double> w, double lambda, std::span<double> grad = {}) {
    double v = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        v += w[i] * w[i];
        if (!grad.empty()) grad[i] += lambda * w[i];
    }
    return 0.5 * lambda * v;
}

struct FinetuneConfig {
    PriorKind objective{PriorKind::univ};
    /// Defaults to 1e5 for UNIV and 1e-5 for NINF.
    std::optional<double> lambda;
    /// Required for UNIV; supplies w* for FITU when `start` is absent.
    const LaplacePosterior* posterior{nullptr};
    /// Explicit starting point overriding the objective's default initialization.
    const ModelParameters* start{nullptr};

    [[nodiscard]] double effective_lambda() const { return lambda.value_or(default_lambda(objective)); }
};

/// Draws every entry from N(0, 1) on the stream used by zero-shot NINF, so
/// few-shot NINF starts from exactly the zero-shot model.
inline ModelParameters standard_normal_parameters(const ArchConfig& arch, std::uint64_t seed) {
    ModelParameters p{arch};
    auto rng = Rng::stream(seed, "ninf");
    for (double& x : p.flat.values()) x = rng.normal();
    return p;
}

/// Zero-shot weights: the posterior mean for UNIV and FITU, an N(0, I) draw for NINF.
inline ModelParameters zero_shot_parameters(PriorKind kind, const LaplacePosterior* posterior, const ArchConfig& arch,
                                            std::uint64_t seed) {
    if (kind == PriorKind::ninf) return standard_normal_parameters(arch, seed);
    if (!posterior) throw ConfigError(to_string(kind) + " needs a posterior");
    auto p = posterior->mean_parameters();
    if (p.arch != arch) throw DataError("posterior architecture does not match the requested model");
    return p;
}

inline TrainResult finetune(const ArchConfig& arch, const TrainingLanguage& lang, const FinetuneConfig& ft,
                            const TrainConfig& cfg) {
    const double lambda = ft.effective_lambda();
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
    if (ft.objective == PriorKind::univ && !ft.posterior) throw ConfigError("UNIV fine-tuning needs a posterior");
    if (ft.objective == PriorKind::fitu && !ft.posterior && !ft.start) throw ConfigError("FITU fine-tuning needs a posterior or a start");

    ModelParameters init = ft.start ? *ft.start : zero_shot_parameters(ft.objective, ft.posterior, arch, cfg.seed);
    if (init.arch != arch) throw DataError("fine-tuning start does not match the requested architecture");

    Penalty penalty;
    if (ft.objective == PriorKind::univ) {
        if (ft.posterior->size() != init.size()) throw DataError("posterior does not match the model layout");
        const LaplacePosterior* post = ft.posterior;
        penalty = [post, lambda](std::span<const double> w, std::span<double> g) { return univ_penalty(w, *post, lambda, g); };
    } else if (ft.objective == PriorKind::ninf) {
        penalty = [lambda](std::span<const double> w, std::span<double> g) { return ninf_penalty(w, lambda, g); };
    }

    TrainConfig c = cfg;
    c.batch.batch_size = std::max<std::size_t>(1, std::min(cfg.batch.batch_size, lang.train.size()));
    const TrainingLanguage one[] = {lang};
    return run_training(std::move(init), one, c, penalty);
}

}  // namespace uplm
