// Acceptance gate: one PASS/FAIL line per criterion.
//
//   acceptance [--criteria 1,2,...] [--cli PATH] [--work DIR]
//
// Criteria 5 and 6 train desk-scale models on a 10-language synthetic family
// for three seeds and take the better part of an hour on one core.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <unistd.h>

#include "CLI11.hpp"
#include "oracles.hpp"
#include "support.hpp"
#include "uplm/evaluation.hpp"
#include "uplm/regime.hpp"
#include "uplm/synthetic.hpp"
#include "uplm/training.hpp"

using namespace uplm;
using namespace uplm::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass{true};
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << "[failed: " << what << "] ";
        }
    }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. Finite differences

/// Model log-loss plus a fine-tuning penalty, differentiated by the library.
class PenalizedObjective {
public:
    PenalizedObjective(SequenceObjective nll, Penalty penalty) : nll_{std::move(nll)}, penalty_{std::move(penalty)} {}

    double value(std::span<const double> w) {
        std::vector<double> scratch(w.size(), 0.0);
        return nll_.value(w) + (penalty_ ? penalty_(w, scratch) : 0.0);
    }
    double value_and_gradient(std::span<const double> w, std::span<double> g) {
        const double v = nll_.value_and_gradient(w, g);
        return v + (penalty_ ? penalty_(w, g) : 0.0);
    }

private:
    SequenceObjective nll_;
    Penalty penalty_;
};

void criterion_1(Outcome& o) {
    const auto t0 = std::chrono::steady_clock::now();
    FiniteDifferenceOptions opt;
    opt.h = 1e-4;
    opt.tol = 1e-4;
    double worst = 0.0;
    std::size_t checks = 0;
    auto record = [&](const FiniteDifferenceReport& r, const std::string& what) {
        worst = std::max(worst, r.max_relative_error);
        ++checks;
        if (!r.passed) {
            const auto k = static_cast<std::size_t>(std::find(r.indices.begin(), r.indices.end(), r.worst_index) - r.indices.begin());
            o.detail << "(" << what << ": analytic " << r.analytic[k] << " numeric " << r.numeric[k] << ") ";
        }
        o.require(r.passed, what);
    };
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (Conditioning cond : {Conditioning::bare, Conditioning::oest, Conditioning::plat}) {
            auto rng = Rng::stream(seed, "acceptance-fd");
            const std::size_t vocab = 5 + rng.below(3);
            const auto a = tiny_arch(vocab, cond);
            auto p = init_parameters(a, seed);
            for (auto& x : p.flat.values()) x += 0.3 * rng.normal();
            const std::vector<Sentence> rows{random_sentence(rng, vocab, 2, 5), random_sentence(rng, vocab, 2, 5)};
            const auto t = cond == Conditioning::bare ? std::vector<double>{} : random_typology(rng, a.typology_dim);
            auto drop_rng = rng.split("dropout");
            const auto plan = cond == Conditioning::bare ? DropoutPlan::sample(a, 2, DropoutConfig{}, drop_rng) : DropoutPlan::eval();
            SequenceObjective obj{p, make_segments(rows, 100), t, plan};
            record(finite_difference_check(obj, p.flat.span(), opt), to_string(cond) + " seed " + std::to_string(seed));
        }
        // The three fine-tuning objectives on a BARE model.
        auto rng = Rng::stream(seed, "acceptance-fd-penalty");
        const auto a = tiny_arch(6);
        auto p = init_parameters(a, seed + 100);
        for (auto& x : p.flat.values()) x += 0.3 * rng.normal();
        Tensor f{{p.size()}, 0.0};
        for (std::size_t i = 0; i < p.size(); ++i) f[i] = rng.uniform(0.0, 3.0);
        // w* near w, as during fine-tuning; a distant w* inflates the penalty until
        // central differences drown in rounding.
        auto w_star = p;
        for (auto& x : w_star.flat.values()) x += 0.1 * rng.normal();
        const auto post = assemble_posterior(w_star, f, rng.uniform(0.5, 2.0));
        const double lambda = rng.uniform(0.1, 2.0);
        const std::vector<Sentence> rows{random_sentence(rng, 6, 2, 6), random_sentence(rng, 6, 2, 6)};
        const std::pair<const char*, Penalty> penalties[] = {
            {"UNIV", [&](std::span<const double> w, std::span<double> g) { return univ_penalty(w, post, lambda, g); }},
            {"NINF", [&](std::span<const double> w, std::span<double> g) { return ninf_penalty(w, lambda, g); }},
            {"FITU", Penalty{}},
        };
        for (const auto& [name, pen] : penalties) {
            PenalizedObjective obj{SequenceObjective{p, make_segments(rows, 100)}, pen};
            record(finite_difference_check(obj, p.flat.span(), opt), std::string{name} + " seed " + std::to_string(seed));
        }
    }
    const double secs = seconds_since(t0);
    o.require(secs < 60.0, "runtime under 1 min");
    o.detail << checks << " checks over 20 seeds, worst relative error " << worst << ", " << secs << " s";
}

// ---------------------------------------------------------------------------
// 2. Conjugate Gaussian

void criterion_2(Outcome& o) {
    auto rng = Rng::stream(2, "acceptance-toy");
    double worst = 0.0;
    for (std::size_t n : {1, 10, 100}) {
        std::vector<double> xs(n);
        for (auto& x : xs) x = rng.normal(-0.4, 1.0);
        double sum = 0.0;
        for (double x : xs) sum += x;
        const double var = 1.0 / (static_cast<double>(n) + 1.0);
        const auto r = laplace_on_gaussian_toy(xs, 1.0);
        worst = std::max({worst, std::abs(r.mean - sum * var), std::abs(r.variance - var)});
    }
    o.require(worst < 1e-8, "mean and variance within 1e-8");
    o.detail << "n in {1,10,100}, max deviation " << worst;
}

// ---------------------------------------------------------------------------
// 3. Fisher vs brute force

void criterion_3(Outcome& o) {
    double worst = 0.0, worst_perm = 0.0;
    std::size_t max_params = 0;
    for (Conditioning cond : {Conditioning::bare, Conditioning::oest, Conditioning::plat}) {
        const auto fx = fixture(31, cond);
        max_params = std::max(max_params, fx.params.size());
        const auto langs = fx.languages();
        const auto f = fisher_diagonal(fx.params, langs);
        worst = std::max(worst, max_abs_diff(f.values(), brute_force_fisher(fx)));

        auto shuffled = fx;
        std::reverse(shuffled.ids.begin(), shuffled.ids.end());
        std::reverse(shuffled.data.begin(), shuffled.data.end());
        std::reverse(shuffled.typology.begin(), shuffled.typology.end());
        for (auto& seqs : shuffled.data) std::rotate(seqs.begin(), seqs.begin() + 1, seqs.end());
        const auto g = fisher_diagonal(fx.params, shuffled.languages());
        worst_perm = std::max(worst_perm, max_abs_diff(f.values(), g.values()));
    }
    o.require(max_params <= 2000, "tiny model has at most 2k parameters");
    o.require(worst < 1e-10, "brute force within 1e-10");
    o.require(worst_perm < 1e-10, "permutation invariance");
    o.detail << "3 languages x 4 sequences, BARE/OEST/PLAT, <= " << max_params << " params, max |diff| " << worst
             << ", after permutation " << worst_perm;
}

// ---------------------------------------------------------------------------
// 4. BPC sanity

void criterion_4(Outcome& o) {
    const std::size_t V = 32;
    const auto a = ArchConfig::desk(V);
    auto p = init_parameters(a, 4);
    for (double& x : p.flat.values()) x *= 1e-3;
    auto rng = Rng::stream(4, "acceptance-bpc");
    std::vector<Sentence> split;
    for (int i = 0; i < 50; ++i) split.push_back(random_sentence(rng, V, 5, 40));
    const double near_zero = bpc(p, split);

    // BOS is never a target; its logit is pushed out so EOS and the single
    // character each get probability one half.
    const ArchConfig half{3, 4, 4, 1, Conditioning::bare, 0, 0};
    ModelParameters h{half};
    h.block("output.bias")(CharVocabulary::bos, 0) = -1000.0;
    const std::vector<Sentence> coin(20, Sentence{CharVocabulary::bos, 2, 2, 2, CharVocabulary::eos});
    const double one = bpc(h, coin);

    o.require(std::abs(near_zero - std::log2(static_cast<double>(V))) < 0.1, "near-zero model within 0.1 of log2 V");
    o.require(std::abs(one - 1.0) < 1e-9, "probability-1/2 model at 1 bit");
    o.detail << "near-zero " << near_zero << " vs log2(" << V << ") = " << std::log2(static_cast<double>(V))
             << "; half-probability model " << one;
}

// ---------------------------------------------------------------------------
// 5 and 6. Desk-scale orderings on the synthetic family

FamilySpec desk_family(std::uint64_t seed) {
    FamilySpec fs;
    fs.languages = 10;
    fs.sentences = 2000;
    // Active perturbations also shift unigram frequencies, which an output-layer
    // typology term can express.
    fs.tilt = 1.0;
    fs.seed = seed;
    return fs;
}

ExperimentData family_data(const FamilySpec& fs) {
    const auto fam = generate_synthetic_family(fs);
    ExperimentData data;
    data.vocab = build_vocabulary(fam.languages);
    for (const auto& r : fam.languages) data.datasets.push_back(split_dataset(r, data.vocab, fs.seed));
    data.typology = fam.typology;
    return data;
}

RegimeSpec desk_spec(std::uint64_t seed, Conditioning cond, std::vector<Regime> regimes) {
    RegimeSpec s;
    s.regimes = std::move(regimes);
    s.partitions = {{"s08", "s09"}};
    s.conditioning = cond;
    s.univ_lambda_grid = {1, 10, 100};
    s.ninf_lambda_grid = {1e-5};
    s.fisher_max_sequences = 300;
    s.seed = seed;
    return s;
}

RegimeConfigs desk_configs(std::size_t vocab) {
    return {ArchConfig::desk(vocab), TrainConfig::desk(), TrainConfig::desk_fewshot()};
}

struct DeskResults {
    std::vector<ResultTable> bare;  // ZERO_SHOT, FEW_SHOT and JOINT per seed
    std::vector<ResultTable> oest;  // JOINT per seed
    std::optional<double> plat;
    double bare_seconds{0.0};
};

DeskResults& desk_results() {
    static DeskResults r;
    static bool done = false;
    if (done) return r;
    done = true;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto data = family_data(desk_family(seed));
        const auto cfg = desk_configs(data.vocab.size());
        auto t0 = std::chrono::steady_clock::now();
        auto say = [&](const std::string& m) { std::cerr << "  [seed " << seed << ", " << seconds_since(t0) << " s] " << m << '\n'; };
        r.bare.push_back(
            run_regime(desk_spec(seed, Conditioning::bare, {Regime::zero_shot, Regime::few_shot, Regime::joint}), data, cfg, say).table);
        r.bare_seconds += seconds_since(t0);
        t0 = std::chrono::steady_clock::now();
        r.oest.push_back(run_regime(desk_spec(seed, Conditioning::oest, {Regime::joint}), data, cfg, say).table);
        if (seed == 0) {
            t0 = std::chrono::steady_clock::now();
            const auto plat = run_regime(desk_spec(seed, Conditioning::plat, {Regime::joint}), data, cfg, say).table;
            r.plat = plat.find(ResultTable::all_label, "JOINT", "-", "PLAT");
        }
    }
    return r;
}

double seed_mean(const std::vector<ResultTable>& tables, std::string_view lang, std::string_view regime, std::string_view prior,
                 std::string_view cond) {
    double s = 0.0;
    for (const auto& t : tables) {
        const auto v = t.find(lang, regime, prior, cond);
        if (!v) throw std::runtime_error("missing result row " + std::string{regime} + "/" + std::string{prior});
        s += *v;
    }
    return s / static_cast<double>(tables.size());
}

void criterion_5(Outcome& o) {
    const auto& r = desk_results();
    auto mean = [&](const char* regime, const char* prior) { return seed_mean(r.bare, "All", regime, prior, "BARE"); };
    const double zs_univ = mean("ZERO_SHOT", "UNIV"), zs_ninf = mean("ZERO_SHOT", "NINF");
    const double fs_univ = mean("FEW_SHOT", "UNIV"), fs_fitu = mean("FEW_SHOT", "FITU"), fs_ninf = mean("FEW_SHOT", "NINF");
    o.require(zs_ninf - zs_univ >= 1.0, "ZERO_SHOT UNIV below NINF by >= 1 bit");
    o.require(fs_fitu - fs_univ >= 0.05, "FEW_SHOT UNIV below FITU by >= 0.05");
    o.require(fs_ninf - fs_fitu >= 0.05, "FEW_SHOT FITU below NINF by >= 0.05");
    o.detail << "ZS UNIV " << zs_univ << " NINF " << zs_ninf << "; FS UNIV " << fs_univ << " FITU " << fs_fitu << " NINF "
             << fs_ninf << ";";
    for (const char* lang : {"s08", "s09"}) {
        const double joint = seed_mean(r.bare, lang, "JOINT", "-", "BARE");
        const double fs = seed_mean(r.bare, lang, "FEW_SHOT", "UNIV", "BARE");
        o.require(joint <= fs, std::string{"JOINT <= FEW_SHOT UNIV on "} + lang);
        o.detail << " " << lang << " JOINT " << joint << " vs FS UNIV " << fs << ";";
    }
    o.detail << " 3 seeds, " << r.bare_seconds / 60.0 << " min";
}

void criterion_6(Outcome& o) {
    const auto& r = desk_results();
    const double bare = seed_mean(r.bare, "All", "JOINT", "-", "BARE");
    const double oest = seed_mean(r.oest, "All", "JOINT", "-", "OEST");
    o.require(oest <= bare, "JOINT OEST <= JOINT BARE");
    o.require(r.plat && std::isfinite(*r.plat), "PLAT finite");
    o.detail << "JOINT BARE " << bare << ", OEST " << oest << " (3 seeds); PLAT " << (r.plat ? *r.plat : NAN) << " (seed 0)";
}

// ---------------------------------------------------------------------------
// 7. Regularizer at the mode

void criterion_7(Outcome& o) {
    const auto a = tiny_arch(8);
    const auto w_star = init_parameters(a, 7);
    auto rng = Rng::stream(7, "acceptance-mode");
    Tensor f{{w_star.size()}, 0.0};
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = rng.uniform(0.0, 10.0);
    const auto post = assemble_posterior(w_star, f, 1.0);
    double at_mode = 0.0;
    for (double lambda : {1.0, 1e5, 1e12}) at_mode = std::max(at_mode, std::abs(univ_penalty(w_star.flat.span(), post, lambda)));

    std::vector<Sentence> train;
    for (int i = 0; i < 100; ++i) train.push_back(random_sentence(rng, 8, 5, 30));
    auto cfg = TrainConfig::paper_fewshot();
    cfg.seed = 7;
    const auto r = finetune(a, TrainingLanguage{"xx", train, {}, {}}, FinetuneConfig{PriorKind::univ, 1e12, &post, nullptr}, cfg);
    double sup = 0.0;
    for (std::size_t i = 0; i < w_star.size(); ++i) sup = std::max(sup, std::abs(r.params.flat[i] - w_star.flat[i]));
    o.require(at_mode == 0.0, "penalty at w* is zero");
    o.require(sup < 1e-4, "lambda = 1e12 stays within 1e-4");
    o.detail << "penalty at w* " << at_mode << "; sup |w - w*| after " << cfg.max_epochs << " epochs at lambda 1e12: " << sup;
}

// ---------------------------------------------------------------------------
// 8. Probes

void criterion_8(Outcome& o) {
    const auto fx = fixture(8, Conditioning::oest);
    const auto f = fisher_diagonal(fx.params, fx.languages());
    const auto post = assemble_posterior(fx.params, f, 0.5);
    const auto s = snr(post);
    double snr_err = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const long double w = fx.params.flat[i];
        const long double expect = std::fabs(w) * std::sqrt(static_cast<long double>(f[i]) + 2.0L);
        snr_err = std::max(snr_err, static_cast<double>(std::fabs(s[i] - expect)));
    }

    auto rng = Rng::stream(8, "acceptance-pearson");
    double rho_err = 0.0;
    for (int k = 0; k < 10; ++k) {
        const std::size_t n = 3 + rng.below(40);
        std::vector<double> x(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = rng.normal(0.0, 2.0);
            y[i] = rng.uniform(-1.0, 1.0) * x[i] + rng.normal();
        }
        rho_err = std::max(rho_err, std::abs(pearson(x, y) - pearson_oracle(x, y)));
    }

    const auto data = family_data([] {
        auto fs = desk_family(8);
        fs.languages = 2;
        fs.sentences = 20;
        return fs;
    }());
    const auto p = init_parameters(ArchConfig::desk(data.vocab.size()), 8);
    const std::set<char32_t> symbols(data.vocab.symbols().begin(), data.vocab.symbols().end());
    std::size_t bad = 0;
    for (std::uint64_t d = 0; d < 1000; ++d) {
        const auto text = sample_text(p, data.vocab, {25, 1.0, d});
        if (text.size() != 25) ++bad;
        for (char32_t c : text) bad += symbols.count(c) ? 0 : 1;
    }
    o.require(snr_err < 1e-12, "SNR within 1e-12");
    o.require(rho_err < 1e-12, "Pearson within 1e-12");
    o.require(bad == 0, "samples hold only vocabulary characters");
    o.detail << "SNR max error " << snr_err << " over " << s.size() << " params; Pearson max error " << rho_err
             << " on 10 instances; " << bad << " bad characters in 1000 samples of 25";
}

// ---------------------------------------------------------------------------
// 9. CLI reproducibility

struct CliRunner {
    std::string exe;
    fs::path dir;

    int operator()(const std::string& args) const {
        const std::string cmd = "cd '" + dir.string() + "' && '" + exe + "' " + args + " >/dev/null 2>>cli.log";
        return std::system(cmd.c_str()) == 0 ? 0 : 1;
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in{p, std::ios::binary};
    if (!in) return "<missing " + p.string() + ">";
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void criterion_9(Outcome& o, const std::string& exe, const fs::path& work) {
    fs::remove_all(work);
    fs::create_directories(work);
    const CliRunner cli{exe, work};
    {
        std::ofstream cfg{work / "tiny.cfg"};
        cfg << "embed_dim = 6\nhidden_dim = 10\nmax_epochs = 2\nlength_mean = 30\n";
        std::ofstream spec{work / "spec.cfg"};
        spec << "regimes = zero_shot, few_shot, joint\npartitions = s04\ndev_languages = 2\nfewshot = 10\n"
                "univ_lambda_grid = 1, 10\nembed_dim = 6\nhidden_dim = 10\nmax_epochs = 1\nlength_mean = 30\n"
                "fewshot.max_epochs = 3\n";
    }
    // Each command twice into out/a and out/b; `rerun` replays a's manifest into out/c.
    struct Step {
        std::string name;
        std::string args;  // "{}" is replaced by the output location
        std::vector<std::string> files;
        std::string out_suffix;
    };
    const std::vector<Step> steps{
        {"synth", "--seed 11 synth --tilt 1 --languages 5 --sentences 80 --out {}", {"corpus/s00.txt", "corpus/s04.txt", "typology.tsv"}, ""},
        {"train", "--seed 11 train --corpus synth_a --langs s00,s01,s02,s03 --config tiny.cfg --typology synth_a/typology.tsv "
                  "--set conditioning=oest --out {}",
         {"model.ckpt", "train_log.tsv"}, ""},
        {"fisher", "--seed 11 fisher --model train_a/model.ckpt --corpus synth_a --typology synth_a/typology.tsv --out {}",
         {"posterior.posterior"}, ""},
        {"finetune", "--seed 11 finetune --posterior fisher_a/posterior.posterior --lang s04 --corpus synth_a "
                     "--typology synth_a/typology.tsv --fewshot 12 --lambda 10 --set max_epochs=3 --out {}",
         {"model.ckpt", "train_log.tsv"}, ""},
        {"eval", "eval --model finetune_a/model.ckpt --corpus synth_a --langs s00,s01,s02,s03,s04 --typology synth_a/typology.tsv --out {}", {"results.tsv"}, ""},
        {"regime", "--seed 11 regime --spec spec.cfg --corpus synth_a --quiet --out {}",
         {"results.tsv", "posterior_0.posterior", "joint.ckpt", "lambda.tsv"}, ""},
        {"generate", "--seed 11 generate --model train_a/model.ckpt --typology synth_a/typology.tsv --lang s04 --count 20 --out {}",
         {"samples.txt"}, ""},
        {"probe", "probe snr --posterior fisher_a/posterior.posterior --out {}", {"snr_histogram.tsv"}, ""},
        {"analyze", "analyze chardist --corpus synth_a --results eval_a/results.tsv --regime EVAL --out {}",
         {"chardist.tsv"}, ""},
    };
    std::size_t compared = 0;
    for (const auto& s : steps) {
        auto args_for = [&](const std::string& where) {
            auto a = s.args;
            a.replace(a.find("{}"), 2, where);
            return a;
        };
        const bool ok_a = cli(args_for(s.name + "_a")) == 0;
        const bool ok_b = cli(args_for(s.name + "_b")) == 0;
        const bool ok_c = cli("rerun --manifest " + s.name + "_a/manifest.json --out " + s.name + "_c") == 0;
        o.require(ok_a && ok_b && ok_c, s.name + " ran");
        for (const auto& f : s.files) {
            const auto a = slurp(work / (s.name + "_a") / f);
            o.require(a == slurp(work / (s.name + "_b") / f), s.name + " " + f + " rerun");
            o.require(a == slurp(work / (s.name + "_c") / f), s.name + " " + f + " manifest replay");
            compared += 2;
        }
    }
    o.detail << steps.size() << " commands, " << compared << " byte comparisons (rerun and manifest replay)";
    if (o.pass) fs::remove_all(work);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria 1-9"};
    std::vector<int> only;
    std::string exe =
#ifdef UPLM_CLI_PATH
        UPLM_CLI_PATH;
#else
        "uplm";
#endif
    fs::path work = fs::temp_directory_path() / ("uplm_acceptance_" + std::to_string(::getpid()));
    app.add_option("--criteria", only, "Run only these criteria")->delimiter(',')->check(CLI::Range(1, 9));
    app.add_option("--cli", exe, "uplm executable for criterion 9");
    app.add_option("--work", work, "Scratch directory for criterion 9");
    CLI11_PARSE(app, argc, argv);
    if (only.empty()) only = {1, 2, 3, 4, 5, 6, 7, 8, 9};

    const std::map<int, std::pair<const char*, std::function<void(Outcome&)>>> criteria{
        {1, {"gradient correctness", criterion_1}},
        {2, {"Laplace exactness on the conjugate toy", criterion_2}},
        {3, {"Fisher oracle equivalence", criterion_3}},
        {4, {"BPC sanity", criterion_4}},
        {5, {"ordering at desk scale", criterion_5}},
        {6, {"conditioning effect at desk scale", criterion_6}},
        {7, {"regularizer at the mode", criterion_7}},
        {8, {"posterior probes", criterion_8}},
        {9, {"CLI reproducibility", [&](Outcome& o) { criterion_9(o, exe, work); }}},
    };
    bool all = true;
    for (int c : only) {
        const auto& [name, fn] = criteria.at(c);
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            fn(o);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << "[exception: " << e.what() << "]";
        }
        all = all && o.pass;
        std::cout << "criterion " << c << " (" << name << "): " << (o.pass ? "PASS" : "FAIL") << " -- " << o.detail.str()
                  << " [" << seconds_since(t0) << " s]" << std::endl;
    }
    return all ? 0 : 1;
}
