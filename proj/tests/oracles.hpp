#pragma once

// Brute-force Fisher, conjugate-Gaussian and Pearson oracles shared by the Laplace
// tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "support.hpp"
#include "uplm/laplace.hpp"

namespace uplm::testing {

struct FisherFixture {
    ArchConfig arch;
    ModelParameters params;
    std::vector<std::string> ids;
    std::vector<std::vector<Sentence>> data;
    std::vector<std::vector<double>> typology;

    std::vector<FisherLanguage> languages() const {
        std::vector<FisherLanguage> out;
        for (std::size_t l = 0; l < ids.size(); ++l) out.push_back({ids[l], data[l], typology[l]});
        return out;
    }
};

/// Small enough that every conditioning stays under 2k parameters.
inline ArchConfig fisher_arch(Conditioning cond) {
    auto a = tiny_arch(6, cond);
    a.embed_dim = 4;
    a.hidden_dim = 8;
    return a;
}

inline FisherFixture fixture(std::uint64_t seed, Conditioning cond = Conditioning::bare) {
    FisherFixture fx;
    fx.arch = fisher_arch(cond);
    fx.params = init_parameters(fx.arch, seed);
    auto rng = Rng::stream(seed, "fixture");
    for (const char* id : {"ccc", "aaa", "bbb"}) {
        fx.ids.emplace_back(id);
        std::vector<Sentence> seqs;
        for (int k = 0; k < 4; ++k) seqs.push_back(random_sentence(rng, 6, 2, 9));
        fx.data.push_back(std::move(seqs));
        fx.typology.push_back(cond == Conditioning::bare ? std::vector<double>{} : random_typology(rng, fx.arch.typology_dim));
    }
    return fx;
}

/// Whole-sequence log-likelihood gradient, one fresh runner per call.
inline std::vector<double> sequence_gradient(const ModelParameters& p, const Sentence& s, std::span<const double> typology) {
    ModelRunner runner{p, typology};
    LstmState state;
    runner.accumulate(make_single_segment(s), state, DropoutPlan::eval(), 1.0);
    std::vector<double> g(p.size(), 0.0);
    runner.add_gradient_to(g);
    return g;
}

/// Double loop over languages and sequences in the given order.
inline std::vector<double> brute_force_fisher(const FisherFixture& fx) {
    std::vector<double> f(fx.params.size(), 0.0);
    for (std::size_t l = 0; l < fx.ids.size(); ++l) {
        for (const auto& s : fx.data[l]) {
            const auto g = sequence_gradient(fx.params, s, fx.typology[l]);
            for (std::size_t i = 0; i < f.size(); ++i) {
                f[i] += g[i] * g[i] / (static_cast<double>(fx.ids.size()) * static_cast<double>(fx.data[l].size()));
            }
        }
    }
    return f;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

struct ConjugateResult {
    double mean, variance;
};

/// Gaussian likelihood N(x; w, 1) with prior N(0, s2): MAP by one Newton step
/// from zero, curvature by a second difference of the log-likelihood.
inline ConjugateResult laplace_on_gaussian_toy(const std::vector<double>& xs, double s2) {
    auto loglik = [&](double w) {
        double s = 0.0;
        for (double x : xs) s += -0.5 * (x - w) * (x - w);
        return s;
    };
    auto grad_logpost = [&](double w) {
        double g = -w / s2;
        for (double x : xs) g += x - w;
        return g;
    };
    const double h = 0.5;
    const double curvature = -(loglik(h) - 2 * loglik(0.0) + loglik(-h)) / (h * h);
    const double w_star = grad_logpost(0.0) / (curvature + 1.0 / s2);
    const auto post = assemble_posterior(Tensor::from_vector({w_star}), Tensor::from_vector({curvature}), s2);
    return {post.mean[0], post.variance_diag()[0]};
}

/// Computational form n*Sxy - Sx*Sy over the root of the two variance terms.
inline double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxy += x[i] * y[i];
        sxx += x[i] * x[i];
        syy += y[i] * y[i];
    }
    return (n * sxy - sx * sy) / (std::sqrt(n * sxx - sx * sx) * std::sqrt(n * syy - sy * sy));
}

}  // namespace uplm::testing
