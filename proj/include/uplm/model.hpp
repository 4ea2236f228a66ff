#pragma once

// Character-level LSTM language model with tied input/output embeddings,
// variational dropout, DropConnect on the first recurrent matrix, state
// carry-over between segments, and two typology-conditioned variants:
//
//   OEST  the encoded typology vector f(t) is concatenated to the top hidden
//         state before the output projection [embedding | oest.output].
//   PLAT  a bias-free linear hyper-network maps f(t) to the whole base
//         parameter vector; only the hyper-network and encoder are trained.
//
// Layer widths follow the tied-embedding convention: every layer has width
// `hidden_dim` except the top one, whose width is `embed_dim` so that the
// embedding matrix doubles as the output projection.
//
// Activations are stored column-major as (features x steps*batch) with column
// t*batch + b holding step t of row b.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "uplm/config.hpp"
#include "uplm/corpus.hpp"
#include "uplm/errors.hpp"
#include "uplm/numerics.hpp"
#include "uplm/rng.hpp"
#include "uplm/typology.hpp"

namespace uplm {

using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using VectorMap = Eigen::Map<Eigen::VectorXd>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

enum class Conditioning { bare, oest, plat };

inline std::string to_string(Conditioning c) {
    switch (c) {
        case Conditioning::bare: return "BARE";
        case Conditioning::oest: return "OEST";
        case Conditioning::plat: return "PLAT";
    }
    return "?";
}

inline Conditioning parse_conditioning(std::string_view s) {
    std::string u{s};
    std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    if (u == "BARE") return Conditioning::bare;
    if (u == "OEST") return Conditioning::oest;
    if (u == "PLAT") return Conditioning::plat;
    throw ConfigError("unknown conditioning '" + std::string{s} + "' (expected bare, oest or plat)");
}

struct ArchConfig {
    std::size_t vocab_size{0};
    std::size_t embed_dim{64};
    std::size_t hidden_dim{128};
    std::size_t layers{2};
    Conditioning conditioning{Conditioning::bare};
    /// Number of typology features F (OEST and PLAT).
    std::size_t typology_dim{0};
    /// Encoder bottleneck r (OEST and PLAT).
    std::size_t bottleneck{0};

    static ArchConfig desk(std::size_t vocab) { return {vocab, 64, 128, 2, Conditioning::bare, 0, 0}; }
    static ArchConfig paper(std::size_t vocab) { return {vocab, 400, 1840, 3, Conditioning::bare, 0, 0}; }

    [[nodiscard]] std::size_t layer_width(std::size_t l) const { return l + 1 == layers ? embed_dim : hidden_dim; }
    [[nodiscard]] std::size_t layer_input(std::size_t l) const { return l == 0 ? embed_dim : hidden_dim; }
    [[nodiscard]] bool conditioned() const { return conditioning != Conditioning::bare; }

    void validate() const {
        if (vocab_size < 3) throw ConfigError("vocabulary must hold at least one character");
        if (embed_dim < 1 || hidden_dim < 1 || layers < 1) throw ConfigError("model dimensions must be positive");
        if (conditioned() && (typology_dim < 1 || bottleneck < 1)) {
            throw ConfigError(to_string(conditioning) + " needs typology_dim >= 1 and bottleneck >= 1");
        }
    }

    bool operator==(const ArchConfig&) const = default;

    [[nodiscard]] KeyValueConfig to_config() const {
        KeyValueConfig c;
        c.set("vocab_size", std::to_string(vocab_size));
        c.set("embed_dim", std::to_string(embed_dim));
        c.set("hidden_dim", std::to_string(hidden_dim));
        c.set("layers", std::to_string(layers));
        c.set("conditioning", to_string(conditioning));
        c.set("typology_dim", std::to_string(typology_dim));
        c.set("bottleneck", std::to_string(bottleneck));
        return c;
    }

    static ArchConfig from_config(const KeyValueConfig& c, ArchConfig base) {
        base.vocab_size = static_cast<std::size_t>(c.get_int("vocab_size", static_cast<std::int64_t>(base.vocab_size)));
        base.embed_dim = static_cast<std::size_t>(c.get_int("embed_dim", static_cast<std::int64_t>(base.embed_dim)));
        base.hidden_dim = static_cast<std::size_t>(c.get_int("hidden_dim", static_cast<std::int64_t>(base.hidden_dim)));
        base.layers = static_cast<std::size_t>(c.get_int("layers", static_cast<std::int64_t>(base.layers)));
        if (c.has("conditioning")) base.conditioning = parse_conditioning(c.get_string("conditioning", "bare"));
        base.typology_dim = static_cast<std::size_t>(c.get_int("typology_dim", static_cast<std::int64_t>(base.typology_dim)));
        base.bottleneck = static_cast<std::size_t>(c.get_int("bottleneck", static_cast<std::int64_t>(base.bottleneck)));
        return base;
    }
    static ArchConfig from_config(const KeyValueConfig& c) { return from_config(c, ArchConfig{}); }
};

inline std::string layer_block(std::size_t l, std::string_view part) {
    return "lstm" + std::to_string(l) + "." + std::string{part};
}

/// Blocks of the unconditioned network: embedding, per-layer input/recurrent
/// weights and gate biases (gate order i, f, g, o), output bias.
inline ParameterLayout base_layout(const ArchConfig& a) {
    ParameterLayout layout;
    layout.add("embedding", a.vocab_size, a.embed_dim);
    for (std::size_t l = 0; l < a.layers; ++l) {
        const std::size_t H = a.layer_width(l);
        layout.add(layer_block(l, "input"), 4 * H, a.layer_input(l));
        layout.add(layer_block(l, "recurrent"), 4 * H, H);
        layout.add(layer_block(l, "bias"), 4 * H, 1);
    }
    layout.add("output.bias", a.vocab_size, 1);
    return layout;
}

/// Trainable layout. BARE and OEST start with the base blocks; PLAT replaces
/// them with the hyper-network.
inline ParameterLayout model_layout(const ArchConfig& a) {
    switch (a.conditioning) {
        case Conditioning::bare: return base_layout(a);
        case Conditioning::oest: {
            auto layout = base_layout(a);
            layout.add("oest.output", a.vocab_size, a.bottleneck);
            layout.add("encoder.weight", a.bottleneck, a.typology_dim);
            layout.add("encoder.bias", a.bottleneck, 1);
            return layout;
        }
        case Conditioning::plat: {
            ParameterLayout layout;
            layout.add("hyper", base_layout(a).total_size(), a.bottleneck);
            layout.add("encoder.weight", a.bottleneck, a.typology_dim);
            layout.add("encoder.bias", a.bottleneck, 1);
            return layout;
        }
    }
    return {};
}

struct ModelParameters {
    ArchConfig arch;
    ParameterLayout layout;
    Tensor flat;

    ModelParameters() = default;
    explicit ModelParameters(const ArchConfig& a) : arch{a}, layout{model_layout(a)} {
        a.validate();
        flat = Tensor{{std::max<std::size_t>(1, layout.total_size())}, 0.0};
    }

    [[nodiscard]] std::size_t size() const noexcept { return layout.total_size(); }

    RowMap block(std::string_view name) {
        const auto& b = layout.at(name);
        return RowMap{flat.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
    }
    [[nodiscard]] ConstRowMap block(std::string_view name) const {
        const auto& b = layout.at(name);
        return ConstRowMap{flat.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
    }

    /// The output projection is the embedding block itself (tied weights).
    RowMap output_projection() { return block("embedding"); }
    [[nodiscard]] ConstRowMap output_projection() const { return block("embedding"); }
};

namespace detail {

inline void fill_uniform(std::span<double> out, double a, Rng& rng) {
    for (double& x : out) x = rng.uniform(-a, a);
}

/// Per-entry initialization scale of the base layout (used directly and to
/// scale the PLAT hyper-network rows).
inline std::vector<double> base_init_scales(const ArchConfig& a, const ParameterLayout& base) {
    std::vector<double> s(base.total_size(), 0.0);
    for (const auto& b : base.blocks()) {
        double scale = 0.0;
        if (b.name == "embedding") {
            scale = 0.1;
        } else if (b.name.starts_with("lstm") && !b.name.ends_with(".bias")) {
            const std::size_t l = static_cast<std::size_t>(std::stoul(b.name.substr(4)));
            scale = 1.0 / std::sqrt(static_cast<double>(a.layer_width(l)));
        }
        std::fill(s.begin() + static_cast<std::ptrdiff_t>(b.offset),
                  s.begin() + static_cast<std::ptrdiff_t>(b.offset + b.size()), scale);
    }
    return s;
}

}  // namespace detail

/// Seeded initialization: embeddings U(+-0.1), LSTM weights U(+-1/sqrt(H)),
/// biases 0 except the forget gate (+1), encoder U(+-sqrt(6/(r+F))).
inline ModelParameters init_parameters(const ArchConfig& arch, std::uint64_t seed) {
    ModelParameters p{arch};
    auto rng = Rng::stream(seed, "init");
    const auto base = base_layout(arch);
    const auto scales = detail::base_init_scales(arch, base);

    auto init_encoder = [&] {
        auto erng = rng.split("encoder");
        const double a = std::sqrt(6.0 / static_cast<double>(arch.bottleneck + arch.typology_dim));
        const auto& w = p.layout.at("encoder.weight");
        const auto& b = p.layout.at("encoder.bias");
        detail::fill_uniform(p.flat.span().subspan(w.offset, w.size()), a, erng);
        detail::fill_uniform(p.flat.span().subspan(b.offset, b.size()), a, erng);
    };

    if (arch.conditioning != Conditioning::plat) {
        auto brng = rng.split("base");
        for (std::size_t i = 0; i < base.total_size(); ++i) {
            p.flat[i] = scales[i] > 0.0 ? brng.uniform(-scales[i], scales[i]) : 0.0;
        }
        for (std::size_t l = 0; l < arch.layers; ++l) {
            const std::size_t H = arch.layer_width(l);
            const auto& b = base.at(layer_block(l, "bias"));
            for (std::size_t k = H; k < 2 * H; ++k) p.flat[b.offset + k] = 1.0;
        }
        if (arch.conditioning == Conditioning::oest) {
            auto orng = rng.split("oest");
            const auto& o = p.layout.at("oest.output");
            detail::fill_uniform(p.flat.span().subspan(o.offset, o.size()), 0.1, orng);
            init_encoder();
        }
    } else {
        // Row j of the hyper-network generates base entry j; its scale makes the
        // generated weights comparable to a direct initialization.
        auto hrng = rng.split("hyper");
        const auto& hyper = p.layout.at("hyper");
        const std::size_t r = arch.bottleneck;
        const double norm = 1.0 / std::sqrt(static_cast<double>(r));
        for (std::size_t j = 0; j < base.total_size(); ++j) {
            for (std::size_t k = 0; k < r; ++k) {
                p.flat[hyper.offset + j * r + k] = scales[j] > 0.0 ? hrng.uniform(-scales[j], scales[j]) * norm : 0.0;
            }
        }
        for (std::size_t l = 0; l < arch.layers; ++l) {
            const std::size_t H = arch.layer_width(l);
            const auto& b = base.at(layer_block(l, "bias"));
            for (std::size_t k = H; k < 2 * H; ++k) {
                for (std::size_t q = 0; q < r; ++q) p.flat[hyper.offset + (b.offset + k) * r + q] = 1.0 / static_cast<double>(r);
            }
        }
        init_encoder();
    }
    return p;
}

// ---------------------------------------------------------------------------
// Dropout

/// Keep probabilities. Defaults: embeddings 0.9, intermediate hidden 0.9,
/// top output 0.6, DropConnect on the first recurrent matrix 0.8.
struct DropoutConfig {
    double embedding_keep{0.9};
    double hidden_keep{0.9};
    double output_keep{0.6};
    double dropconnect_keep{0.8};

    static DropoutConfig none() { return {1.0, 1.0, 1.0, 1.0}; }
};

/// One set of masks per batch, shared by every time step. Mask entries are
/// 0 or 1/keep. An eval plan has no masks.
struct DropoutPlan {
    bool train{false};
    std::size_t batch{0};
    Matrix embedding;               // E x B
    std::vector<Matrix> hidden;     // per layer boundary, width x B
    Matrix output;                  // E x B
    Matrix dropconnect;             // 4H0 x H0

    static DropoutPlan eval() { return {}; }

    static DropoutPlan sample(const ArchConfig& a, std::size_t batch, const DropoutConfig& cfg, Rng& rng) {
        DropoutPlan p;
        p.train = true;
        p.batch = batch;
        const auto B = static_cast<Eigen::Index>(batch);
        auto mask = [&rng](Eigen::Index rows, Eigen::Index cols, double keep) {
            Matrix m(rows, cols);
            for (Eigen::Index j = 0; j < cols; ++j) {
                for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
            }
            return m;
        };
        p.embedding = mask(static_cast<Eigen::Index>(a.embed_dim), B, cfg.embedding_keep);
        for (std::size_t l = 0; l + 1 < a.layers; ++l) {
            p.hidden.push_back(mask(static_cast<Eigen::Index>(a.layer_width(l)), B, cfg.hidden_keep));
        }
        p.output = mask(static_cast<Eigen::Index>(a.embed_dim), B, cfg.output_keep);
        const auto H0 = static_cast<Eigen::Index>(a.layer_width(0));
        p.dropconnect = mask(4 * H0, H0, cfg.dropconnect_keep);
        return p;
    }
};

struct LstmState {
    std::vector<Matrix> h;
    std::vector<Matrix> c;

    static LstmState zeros(const ArchConfig& a, std::size_t batch) {
        LstmState s;
        for (std::size_t l = 0; l < a.layers; ++l) {
            s.h.push_back(Matrix::Zero(static_cast<Eigen::Index>(a.layer_width(l)), static_cast<Eigen::Index>(batch)));
            s.c.push_back(Matrix::Zero(static_cast<Eigen::Index>(a.layer_width(l)), static_cast<Eigen::Index>(batch)));
        }
        return s;
    }

    [[nodiscard]] bool empty() const noexcept { return h.empty(); }
    [[nodiscard]] std::size_t batch() const noexcept { return h.empty() ? 0 : static_cast<std::size_t>(h.front().cols()); }

    /// State restricted to the first `batch` columns (zero-extended if wider).
    [[nodiscard]] LstmState columns(std::size_t batch) const {
        LstmState s;
        for (std::size_t l = 0; l < h.size(); ++l) {
            Matrix hh = Matrix::Zero(h[l].rows(), static_cast<Eigen::Index>(batch));
            Matrix cc = Matrix::Zero(c[l].rows(), static_cast<Eigen::Index>(batch));
            const auto k = std::min<Eigen::Index>(h[l].cols(), static_cast<Eigen::Index>(batch));
            hh.leftCols(k) = h[l].leftCols(k);
            cc.leftCols(k) = c[l].leftCols(k);
            s.h.push_back(std::move(hh));
            s.c.push_back(std::move(cc));
        }
        return s;
    }

    /// Writes `part` into the first columns of this state.
    void store_columns(const LstmState& part) {
        for (std::size_t l = 0; l < h.size(); ++l) {
            const auto k = part.h[l].cols();
            h[l].leftCols(k) = part.h[l];
            c[l].leftCols(k) = part.c[l];
        }
    }
};

// ---------------------------------------------------------------------------
// Network core

namespace detail {

struct NetView {
    const ArchConfig* arch{nullptr};
    const double* base{nullptr};
    const ParameterLayout* layout{nullptr};
    const double* oest_output{nullptr};
    const Eigen::VectorXd* extra{nullptr};
};

struct NetGrad {
    double* base{nullptr};
    double* oest_output{nullptr};
    Eigen::VectorXd* extra{nullptr};
};

struct LayerCache {
    Matrix input;   // in x TB (after dropout)
    Matrix gates;   // 4H x TB, post-activation i, f, g, o
    Matrix c;       // H x TB
    Matrix tc;      // tanh(c)
    Matrix h;       // H x TB
    Matrix h0, c0;  // H x B
};

template <class Block>
void apply_step_mask(Block&& m, const Matrix& mask, Eigen::Index steps, Eigen::Index batch) {
    for (Eigen::Index t = 0; t < steps; ++t) m.middleCols(t * batch, batch).array() *= mask.array();
}

template <class X>
void sigmoid_inplace(X&& x) {
    x = (1.0 + (-x.array()).exp()).inverse().matrix();
}

/// Forward (and optionally backward) pass over one segment. Returns the summed
/// negative log-likelihood of the valid positions. When `g` is given,
/// `scale` * d(NLL)/d(weights) is accumulated into it. `state` is advanced.
inline double run_segment(const NetView& v, const Segment& seg, LstmState& state, const DropoutPlan& plan,
                          const NetGrad* g, double scale, Matrix* logprobs_out) {
    using Eigen::Index;
    const ArchConfig& a = *v.arch;
    const auto& layout = *v.layout;
    const Index T = static_cast<Index>(seg.steps);
    const Index B = static_cast<Index>(seg.batch);
    const Index TB = T * B;
    const Index V = static_cast<Index>(a.vocab_size);
    const Index E = static_cast<Index>(a.embed_dim);
    const std::size_t L = a.layers;

    if (state.empty()) state = LstmState::zeros(a, seg.batch);
    if (state.batch() != seg.batch) throw std::invalid_argument("run_segment: state batch does not match segment");
    if (plan.train && plan.batch != seg.batch) throw std::invalid_argument("run_segment: dropout plan batch mismatch");
    if (seg.inputs.size() != static_cast<std::size_t>(TB)) throw std::invalid_argument("run_segment: malformed segment");

    for (Index k = 0; k < TB; ++k) {
        const auto in = seg.inputs[static_cast<std::size_t>(k)];
        const auto tg = seg.targets[static_cast<std::size_t>(k)];
        if (in < 0 || in >= V || tg < 0 || tg >= V) throw DataError("symbol index outside the vocabulary");
    }

    const auto& emb_b = layout.at("embedding");
    const ConstRowMap emb{v.base + emb_b.offset, V, E};
    const ConstVectorMap bout{v.base + layout.at("output.bias").offset, V};

    Matrix x(E, TB);
    for (Index k = 0; k < TB; ++k) x.col(k) = emb.row(seg.inputs[static_cast<std::size_t>(k)]).transpose();
    if (plan.train) apply_step_mask(x, plan.embedding, T, B);

    std::vector<LayerCache> caches(L);
    for (std::size_t l = 0; l < L; ++l) {
        const Index H = static_cast<Index>(a.layer_width(l));
        const Index In = static_cast<Index>(a.layer_input(l));
        const ConstRowMap W{v.base + layout.at(layer_block(l, "input")).offset, 4 * H, In};
        const ConstRowMap U{v.base + layout.at(layer_block(l, "recurrent")).offset, 4 * H, H};
        const ConstVectorMap bias{v.base + layout.at(layer_block(l, "bias")).offset, 4 * H};
        auto& cache = caches[l];
        cache.input = (l == 0) ? std::move(x) : caches[l - 1].h;
        if (l > 0 && plan.train) apply_step_mask(cache.input, plan.hidden[l - 1], T, B);

        const bool dropconnect = plan.train && l == 0 && plan.dropconnect.size() > 0;
        Matrix Ueff;
        if (dropconnect) Ueff = U.cwiseProduct(plan.dropconnect);

        cache.gates.noalias() = W * cache.input;
        cache.gates.colwise() += bias;
        cache.h0 = state.h[l];
        cache.c0 = state.c[l];
        cache.c.resize(H, TB);
        cache.tc.resize(H, TB);
        cache.h.resize(H, TB);

        Matrix hprev = state.h[l];
        Matrix cprev = state.c[l];
        for (Index t = 0; t < T; ++t) {
            auto z = cache.gates.middleCols(t * B, B);
            if (dropconnect) {
                z.noalias() += Ueff * hprev;
            } else {
                z.noalias() += U * hprev;
            }
            sigmoid_inplace(z.topRows(2 * H));
            z.middleRows(2 * H, H) = z.middleRows(2 * H, H).array().tanh().matrix();
            sigmoid_inplace(z.bottomRows(H));
            auto c = cache.c.middleCols(t * B, B);
            auto tc = cache.tc.middleCols(t * B, B);
            auto h = cache.h.middleCols(t * B, B);
            c = z.middleRows(H, H).cwiseProduct(cprev) + z.topRows(H).cwiseProduct(z.middleRows(2 * H, H));
            tc = c.array().tanh().matrix();
            h = z.bottomRows(H).cwiseProduct(tc);
            for (Index b = 0; b < B; ++b) {
                if (!seg.mask[static_cast<std::size_t>(t * B + b)]) {
                    h.col(b) = hprev.col(b);
                    c.col(b) = cprev.col(b);
                }
            }
            hprev = h;
            cprev = c;
        }
        if (!cache.h.allFinite() || !cache.c.allFinite()) {
            throw NumericError("non-finite activation in LSTM layer " + std::to_string(l));
        }
        state.h[l] = std::move(hprev);
        state.c[l] = std::move(cprev);
    }

    Matrix hout = caches.back().h;
    if (plan.train) apply_step_mask(hout, plan.output, T, B);

    Matrix logp;
    logp.noalias() = emb * hout;
    logp.colwise() += bout;
    const Index r = v.extra ? v.extra->size() : 0;
    if (v.extra) {
        const ConstRowMap oest{v.oest_output, V, r};
        const Eigen::VectorXd shift = oest * (*v.extra);
        logp.colwise() += shift;
    }
    {
        const Eigen::RowVectorXd mx = logp.colwise().maxCoeff();
        logp.rowwise() -= mx;
        const Eigen::RowVectorXd lse = logp.array().exp().colwise().sum().log().matrix();
        logp.rowwise() -= lse;
    }
    if (!logp.allFinite()) throw NumericError("non-finite output log-probabilities");

    double nll = 0.0;
    for (Index k = 0; k < TB; ++k) {
        if (seg.mask[static_cast<std::size_t>(k)]) nll -= logp(seg.targets[static_cast<std::size_t>(k)], k);
    }

    if (g) {
        Matrix dlogits = logp.array().exp().matrix();
        for (Index k = 0; k < TB; ++k) {
            if (seg.mask[static_cast<std::size_t>(k)]) {
                dlogits(seg.targets[static_cast<std::size_t>(k)], k) -= 1.0;
            } else {
                dlogits.col(k).setZero();
            }
        }
        dlogits *= scale;

        RowMap gemb{g->base + emb_b.offset, V, E};
        gemb.noalias() += dlogits * hout.transpose();
        VectorMap gbout{g->base + layout.at("output.bias").offset, V};
        const Eigen::VectorXd dsum = dlogits.rowwise().sum();
        gbout += dsum;
        if (v.extra) {
            const ConstRowMap oest{v.oest_output, V, r};
            RowMap goest{g->oest_output, V, r};
            goest.noalias() += dsum * v.extra->transpose();
            *g->extra += oest.transpose() * dsum;
        }

        Matrix dh;
        dh.noalias() = emb.transpose() * dlogits;
        if (plan.train) apply_step_mask(dh, plan.output, T, B);

        for (std::size_t li = L; li-- > 0;) {
            const Index H = static_cast<Index>(a.layer_width(li));
            const Index In = static_cast<Index>(a.layer_input(li));
            const ConstRowMap W{v.base + layout.at(layer_block(li, "input")).offset, 4 * H, In};
            const ConstRowMap U{v.base + layout.at(layer_block(li, "recurrent")).offset, 4 * H, H};
            const bool dropconnect = plan.train && li == 0 && plan.dropconnect.size() > 0;
            Matrix Ueff;
            if (dropconnect) Ueff = U.cwiseProduct(plan.dropconnect);
            const auto& cache = caches[li];

            Matrix dz(4 * H, TB);
            Matrix dhn = Matrix::Zero(H, B);
            Matrix dcn = Matrix::Zero(H, B);
            Matrix dht(H, B), dct(H, B);
            for (Index t = T; t-- > 0;) {
                const auto gates = cache.gates.middleCols(t * B, B);
                const auto ig = gates.topRows(H).array();
                const auto fg = gates.middleRows(H, H).array();
                const auto gg = gates.middleRows(2 * H, H).array();
                const auto og = gates.bottomRows(H).array();
                const auto tc = cache.tc.middleCols(t * B, B).array();
                const Matrix cprev_m = t == 0 ? cache.c0 : Matrix{cache.c.middleCols((t - 1) * B, B)};
                const auto cprev = cprev_m.array();

                dht = dh.middleCols(t * B, B) + dhn;
                dct = dcn.array() + dht.array() * og * (1.0 - tc * tc);
                auto dzt = dz.middleCols(t * B, B);
                dzt.topRows(H) = (dct.array() * gg * ig * (1.0 - ig)).matrix();
                dzt.middleRows(H, H) = (dct.array() * cprev * fg * (1.0 - fg)).matrix();
                dzt.middleRows(2 * H, H) = (dct.array() * ig * (1.0 - gg * gg)).matrix();
                dzt.bottomRows(H) = (dht.array() * tc * og * (1.0 - og)).matrix();
                Matrix dcn_next = (dct.array() * fg).matrix();
                for (Index b = 0; b < B; ++b) {
                    if (!seg.mask[static_cast<std::size_t>(t * B + b)]) {
                        dzt.col(b).setZero();
                        dcn_next.col(b) = dcn.col(b);
                    }
                }
                if (dropconnect) {
                    dhn.noalias() = Ueff.transpose() * dzt;
                } else {
                    dhn.noalias() = U.transpose() * dzt;
                }
                for (Index b = 0; b < B; ++b) {
                    if (!seg.mask[static_cast<std::size_t>(t * B + b)]) dhn.col(b) = dht.col(b);
                }
                dcn = std::move(dcn_next);
            }

            RowMap gW{g->base + layout.at(layer_block(li, "input")).offset, 4 * H, In};
            RowMap gU{g->base + layout.at(layer_block(li, "recurrent")).offset, 4 * H, H};
            VectorMap gb{g->base + layout.at(layer_block(li, "bias")).offset, 4 * H};
            gW.noalias() += dz * cache.input.transpose();
            gb += dz.rowwise().sum();
            Matrix hprev(H, TB);
            hprev.leftCols(B) = cache.h0;
            if (T > 1) hprev.rightCols(TB - B) = cache.h.leftCols(TB - B);
            if (dropconnect) {
                Matrix dU;
                dU.noalias() = dz * hprev.transpose();
                gU += dU.cwiseProduct(plan.dropconnect);
            } else {
                gU.noalias() += dz * hprev.transpose();
            }

            Matrix din;
            din.noalias() = W.transpose() * dz;
            if (li > 0) {
                if (plan.train) apply_step_mask(din, plan.hidden[li - 1], T, B);
                dh = std::move(din);
            } else {
                if (plan.train) apply_step_mask(din, plan.embedding, T, B);
                for (Index k = 0; k < TB; ++k) {
                    gemb.row(seg.inputs[static_cast<std::size_t>(k)]) += din.col(k).transpose();
                }
            }
        }
    }

    if (logprobs_out) *logprobs_out = std::move(logp);
    return nll;
}

}  // namespace detail

/// Binds parameters to one language: resolves the conditioning (encoder
/// output, generated PLAT weights) once and accumulates gradients over any
/// number of segments before folding them back into the trainable layout.
class ModelRunner {
public:
    ModelRunner(const ModelParameters& params, std::span<const double> typology = {})
        : p_{&params}, base_layout_{base_layout(params.arch)} {
        const auto& a = params.arch;
        if (a.conditioned()) {
            if (typology.size() != a.typology_dim) {
                throw std::invalid_argument("ModelRunner: typology vector has " + std::to_string(typology.size()) +
                                            " features, model expects " + std::to_string(a.typology_dim));
            }
            typology_.assign(typology.begin(), typology.end());
            const auto W = params.block("encoder.weight");
            const ConstVectorMap b{params.block("encoder.bias").data(), static_cast<Eigen::Index>(a.bottleneck)};
            const ConstVectorMap t{typology_.data(), static_cast<Eigen::Index>(typology_.size())};
            enc_pre_ = W * t + b;
            enc_ = enc_pre_.cwiseMax(0.0);
        }
        if (a.conditioning == Conditioning::plat) {
            const auto hyper = params.block("hyper");
            Eigen::VectorXd w = hyper * enc_;
            generated_.assign(w.data(), w.data() + w.size());
            base_ = generated_.data();
        } else {
            base_ = params.flat.data();
        }
        reset_gradient();
    }

    [[nodiscard]] const Eigen::VectorXd& encoded() const noexcept { return enc_; }
    [[nodiscard]] std::span<const double> base_weights() const noexcept { return {base_, base_layout_.total_size()}; }

    double nll(const Segment& seg, LstmState& state, const DropoutPlan& plan, Matrix* logprobs = nullptr) const {
        const auto view = make_view();
        return detail::run_segment(view, seg, state, plan, nullptr, 1.0, logprobs);
    }

    /// Adds scale * d(NLL)/d(weights) to the internal accumulator.
    double accumulate(const Segment& seg, LstmState& state, const DropoutPlan& plan, double scale) {
        const auto view = make_view();
        detail::NetGrad g{g_base_.data(), g_oest_.empty() ? nullptr : g_oest_.data(), &g_enc_};
        if (!view.extra) g.extra = nullptr;
        return detail::run_segment(view, seg, state, plan, &g, scale, nullptr);
    }

    void reset_gradient() {
        const auto& a = p_->arch;
        g_base_.assign(base_layout_.total_size(), 0.0);
        if (a.conditioning == Conditioning::oest) g_oest_.assign(a.vocab_size * a.bottleneck, 0.0);
        g_enc_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(a.bottleneck));
    }

    /// Adds the accumulated gradient, expressed in the trainable layout, into `full`.
    void add_gradient_to(std::span<double> full) const {
        const auto& a = p_->arch;
        const auto& layout = p_->layout;
        if (full.size() < layout.total_size()) throw std::invalid_argument("add_gradient_to: gradient too short");
        Eigen::VectorXd genc = g_enc_;
        if (a.conditioning != Conditioning::plat) {
            for (std::size_t i = 0; i < g_base_.size(); ++i) full[i] += g_base_[i];
        }
        if (a.conditioning == Conditioning::oest) {
            const auto& o = layout.at("oest.output");
            for (std::size_t i = 0; i < g_oest_.size(); ++i) full[o.offset + i] += g_oest_[i];
        }
        if (a.conditioning == Conditioning::plat) {
            const auto& h = layout.at("hyper");
            const std::size_t r = a.bottleneck;
            RowMap gh{full.data() + h.offset, static_cast<Eigen::Index>(h.rows), static_cast<Eigen::Index>(r)};
            const ConstVectorMap gb{g_base_.data(), static_cast<Eigen::Index>(g_base_.size())};
            gh.noalias() += gb * enc_.transpose();
            genc += p_->block("hyper").transpose() * gb;
        }
        if (a.conditioned()) {
            const Eigen::VectorXd dpre = (enc_pre_.array() > 0.0).select(genc, 0.0);
            const auto& w = layout.at("encoder.weight");
            const auto& b = layout.at("encoder.bias");
            RowMap gw{full.data() + w.offset, static_cast<Eigen::Index>(w.rows), static_cast<Eigen::Index>(w.cols)};
            const ConstVectorMap t{typology_.data(), static_cast<Eigen::Index>(typology_.size())};
            gw.noalias() += dpre * t.transpose();
            for (std::size_t i = 0; i < b.size(); ++i) full[b.offset + i] += dpre(static_cast<Eigen::Index>(i));
        }
    }

private:
    [[nodiscard]] detail::NetView make_view() const {
        detail::NetView v;
        v.arch = &p_->arch;
        v.base = base_;
        v.layout = &base_layout_;
        if (p_->arch.conditioning == Conditioning::oest) {
            v.oest_output = p_->flat.data() + p_->layout.at("oest.output").offset;
            v.extra = &enc_;
        }
        return v;
    }

    const ModelParameters* p_;
    ParameterLayout base_layout_;
    const double* base_{nullptr};
    AlignedVector generated_;
    AlignedVector typology_;
    Eigen::VectorXd enc_pre_;
    Eigen::VectorXd enc_;
    AlignedVector g_base_;
    AlignedVector g_oest_;
    Eigen::VectorXd g_enc_;
};

struct ForwardResult {
    /// |vocab| x (steps*batch) natural-log probabilities.
    Matrix logprobs;
    LstmState state;
    double nll{0.0};
};

inline ForwardResult forward(const ModelParameters& params, const Segment& seg, LstmState state,
                             const DropoutPlan& plan = DropoutPlan::eval(), std::span<const double> typology = {}) {
    ModelRunner runner{params, typology};
    ForwardResult out;
    out.nll = runner.nll(seg, state, plan, &out.logprobs);
    out.state = std::move(state);
    return out;
}

/// (o ⊙ tanh(c)) ⊕ encoded.
inline Eigen::VectorXd oest_hidden(const Eigen::VectorXd& o, const Eigen::VectorXd& c, const Eigen::VectorXd& encoded) {
    if (o.size() != c.size()) throw std::invalid_argument("oest_hidden: o and c differ in size");
    Eigen::VectorXd h(o.size() + encoded.size());
    h.head(o.size()) = o.cwiseProduct(c.array().tanh().matrix());
    h.tail(encoded.size()) = encoded;
    return h;
}

/// Base (BARE) parameters w = hyper * encoded, laid out by `base_layout(arch)`.
template <class HyperMatrix>
ModelParameters plat_generate(const HyperMatrix& hyper, const Eigen::VectorXd& encoded, ArchConfig arch) {
    arch.conditioning = Conditioning::bare;
    arch.typology_dim = 0;
    arch.bottleneck = 0;
    ModelParameters out{arch};
    if (static_cast<std::size_t>(hyper.rows()) != out.size() || hyper.cols() != encoded.size()) {
        throw std::invalid_argument("plat_generate: hyper-network shape does not match the base layout");
    }
    const Eigen::VectorXd w = hyper * encoded;
    std::copy(w.data(), w.data() + w.size(), out.flat.data());
    return out;
}

/// Sum of per-sequence NLL over `segments` processed in order with carried
/// state, as a DifferentiableObjective over the flat trainable vector.
class SequenceObjective {
public:
    SequenceObjective(ModelParameters proto, std::vector<Segment> segments, std::vector<double> typology = {},
                      DropoutPlan plan = DropoutPlan::eval(), bool carry_state = true)
        : proto_{std::move(proto)}, segments_{std::move(segments)}, typology_{std::move(typology)},
          plan_{std::move(plan)}, carry_{carry_state} {}

    double value(std::span<const double> w) {
        load(w);
        ModelRunner runner{proto_, typology_};
        LstmState state;
        double total = 0.0;
        for (const auto& s : segments_) {
            if (!carry_) state = LstmState{};
            total += runner.nll(s, state, plan_);
        }
        return total;
    }

    double value_and_gradient(std::span<const double> w, std::span<double> g) {
        load(w);
        ModelRunner runner{proto_, typology_};
        LstmState state;
        double total = 0.0;
        for (const auto& s : segments_) {
            if (!carry_) state = LstmState{};
            total += runner.accumulate(s, state, plan_, 1.0);
        }
        std::fill(g.begin(), g.end(), 0.0);
        runner.add_gradient_to(g);
        return total;
    }

private:
    void load(std::span<const double> w) {
        if (w.size() != proto_.size()) throw std::invalid_argument("SequenceObjective: parameter size mismatch");
        std::copy(w.begin(), w.end(), proto_.flat.data());
    }

    ModelParameters proto_;
    std::vector<Segment> segments_;
    std::vector<double> typology_;
    DropoutPlan plan_;
    bool carry_;
};

// ---------------------------------------------------------------------------
// Generation

struct SampleOptions {
    std::size_t length{25};
    /// 0 selects the greedy (argmax) limit.
    double temperature{1.0};
    std::uint64_t seed{0};
};

/// The first character is uniform over non-special symbols; each following one
/// is drawn from softmax(log p / temperature) with BOS and EOS masked out.
inline std::u32string sample_text(const ModelParameters& params, const CharVocabulary& vocab, const SampleOptions& opt,
                                  std::span<const double> typology = {}) {
    if (opt.temperature < 0.0) throw std::invalid_argument("sample_text: temperature must be positive");
    if (vocab.size() != params.arch.vocab_size) throw std::invalid_argument("sample_text: vocabulary size mismatch");
    const std::size_t n_symbols = vocab.symbols().size();
    if (n_symbols == 0) throw DataError("vocabulary has no characters to generate");
    auto rng = Rng::stream(opt.seed, "generate");
    ModelRunner runner{params, typology};
    LstmState state = LstmState::zeros(params.arch, 1);

    auto step = [&](std::int32_t token) {
        Segment seg;
        seg.steps = 1;
        seg.batch = 1;
        seg.inputs = {token};
        seg.targets = {CharVocabulary::eos};
        seg.mask = {1};
        Matrix logp;
        runner.nll(seg, state, DropoutPlan::eval(), &logp);
        return Eigen::VectorXd{logp.col(0)};
    };

    std::u32string out;
    if (opt.length == 0) return out;
    step(CharVocabulary::bos);
    auto current = static_cast<std::int32_t>(CharVocabulary::special_count + static_cast<std::int32_t>(rng.below(n_symbols)));
    out.push_back(vocab.symbol_at(current));
    while (out.size() < opt.length) {
        const Eigen::VectorXd logp = step(current);
        const auto V = static_cast<std::int32_t>(logp.size());
        std::int32_t next = CharVocabulary::special_count;
        if (opt.temperature == 0.0) {
            double best = -std::numeric_limits<double>::infinity();
            for (std::int32_t i = CharVocabulary::special_count; i < V; ++i) {
                if (logp(i) > best) best = logp(i), next = i;
            }
        } else {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int32_t i = CharVocabulary::special_count; i < V; ++i) mx = std::max(mx, logp(i) / opt.temperature);
            std::vector<double> w(static_cast<std::size_t>(V), 0.0);
            double total = 0.0;
            for (std::int32_t i = CharVocabulary::special_count; i < V; ++i) {
                w[static_cast<std::size_t>(i)] = std::exp(logp(i) / opt.temperature - mx);
                total += w[static_cast<std::size_t>(i)];
            }
            const double u = rng.uniform() * total;
            double acc = 0.0;
            for (std::int32_t i = CharVocabulary::special_count; i < V; ++i) {
                acc += w[static_cast<std::size_t>(i)];
                next = i;
                if (u < acc) break;
            }
        }
        current = next;
        out.push_back(vocab.symbol_at(current));
    }
    return out;
}

}  // namespace uplm
