#pragma once

// Shared fixtures and independent oracles for the test suites.

#include <cmath>
#include <vector>

#include "uplm/corpus.hpp"
#include "uplm/model.hpp"
#include "uplm/rng.hpp"

namespace uplm::testing {

inline ArchConfig tiny_arch(std::size_t vocab, Conditioning cond = Conditioning::bare) {
    ArchConfig a{vocab, 8, 16, 2, cond, 0, 0};
    if (cond != Conditioning::bare) {
        a.typology_dim = 5;
        a.bottleneck = 3;
    }
    return a;
}

inline Sentence random_sentence(Rng& rng, std::size_t vocab, std::size_t min_len, std::size_t max_len) {
    Sentence s{CharVocabulary::bos};
    const std::size_t n = min_len + rng.below(max_len - min_len + 1);
    for (std::size_t i = 0; i < n; ++i) {
        s.push_back(static_cast<std::int32_t>(CharVocabulary::special_count + rng.below(vocab - CharVocabulary::special_count)));
    }
    s.push_back(CharVocabulary::eos);
    return s;
}

inline std::vector<double> random_typology(Rng& rng, std::size_t F) {
    std::vector<double> t(F);
    for (auto& x : t) x = rng.uniform();
    return t;
}

/// Straight-line LSTM recomputation for a single sequence in eval mode,
/// reading the flat parameter vector entry by entry. Returns one log-prob
/// vector per predicted position.
inline std::vector<std::vector<double>> oracle_logprobs(const ArchConfig& a, const std::vector<double>& base,
                                                        const Sentence& s, const std::vector<double>& oest_output = {},
                                                        const std::vector<double>& encoded = {}) {
    const auto layout = base_layout(a);
    auto at = [&](const std::string& block, std::size_t r, std::size_t c) {
        const auto& b = layout.at(block);
        return base[b.offset + r * b.cols + c];
    };
    const std::size_t V = a.vocab_size, E = a.embed_dim, L = a.layers;
    std::vector<std::vector<double>> h(L), c(L);
    for (std::size_t l = 0; l < L; ++l) {
        h[l].assign(a.layer_width(l), 0.0);
        c[l].assign(a.layer_width(l), 0.0);
    }
    auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    std::vector<std::vector<double>> out;
    for (std::size_t pos = 0; pos + 1 < s.size(); ++pos) {
        std::vector<double> x(E);
        for (std::size_t e = 0; e < E; ++e) x[e] = at("embedding", static_cast<std::size_t>(s[pos]), e);
        for (std::size_t l = 0; l < L; ++l) {
            const std::size_t H = a.layer_width(l);
            const std::string pre = "lstm" + std::to_string(l) + ".";
            std::vector<double> z(4 * H);
            for (std::size_t k = 0; k < 4 * H; ++k) {
                double acc = at(pre + "bias", k, 0);
                for (std::size_t j = 0; j < x.size(); ++j) acc += at(pre + "input", k, j) * x[j];
                for (std::size_t j = 0; j < H; ++j) acc += at(pre + "recurrent", k, j) * h[l][j];
                z[k] = acc;
            }
            for (std::size_t k = 0; k < H; ++k) {
                const double i = sigmoid(z[k]);
                const double f = sigmoid(z[H + k]);
                const double g = std::tanh(z[2 * H + k]);
                const double o = sigmoid(z[3 * H + k]);
                c[l][k] = f * c[l][k] + i * g;
                h[l][k] = o * std::tanh(c[l][k]);
            }
            x = h[l];
        }
        std::vector<double> logits(V);
        double mx = -1e300;
        for (std::size_t v = 0; v < V; ++v) {
            double acc = at("output.bias", v, 0);
            for (std::size_t e = 0; e < E; ++e) acc += at("embedding", v, e) * x[e];
            for (std::size_t k = 0; k < encoded.size(); ++k) acc += oest_output[v * encoded.size() + k] * encoded[k];
            logits[v] = acc;
            mx = std::max(mx, acc);
        }
        double z = 0.0;
        for (double l : logits) z += std::exp(l - mx);
        for (double& l : logits) l = l - mx - std::log(z);
        out.push_back(logits);
    }
    return out;
}

}  // namespace uplm::testing
