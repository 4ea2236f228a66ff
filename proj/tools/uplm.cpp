// uplm: command-line front end for universal-prior language models.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "CLI11.hpp"
#include "json.hpp"
#include "uplm/corpus.hpp"
#include "uplm/evaluation.hpp"
#include "uplm/laplace.hpp"
#include "uplm/regime.hpp"
#include "uplm/synthetic.hpp"
#include "uplm/training.hpp"
#include "uplm/typology.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace uplm;

namespace {

constexpr const char* kToolVersion = "0.3.0";

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string num(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::string read_file(const fs::path& p) {
    std::ifstream in{p, std::ios::binary};
    if (!in) throw DataError("cannot open " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file(const fs::path& p, std::string_view text) {
    std::ofstream out{p, std::ios::binary};
    if (!out) throw DataError("cannot write " + p.string());
    out << text;
}

std::string file_crc(const fs::path& p) {
    const auto bytes = read_file(p);
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08x", detail::crc32_of(std::span<const char>{bytes}));
    return std::string{"crc32:"} + buf;
}

// ---------------------------------------------------------------------------
// Run manifest: one per output directory.

class Manifest {
public:
    Manifest(std::string command, std::vector<std::string> argv) {
        j_["tool"] = "uplm";
        j_["version"] = kToolVersion;
        j_["command"] = std::move(command);
        j_["argv"] = std::move(argv);
        j_["cwd"] = fs::current_path().string();
        j_["started"] = utc_now();
        j_["config"] = json::object();
        j_["inputs"] = json::object();
        j_["outputs"] = json::array();
    }

    void config(const KeyValueConfig& c) {
        for (const auto& [k, v] : c.entries()) j_["config"][k] = v;
    }
    void set(const std::string& k, const std::string& v) { j_["config"][k] = v; }
    void input(const fs::path& p) {
        if (fs::is_directory(p)) {
            std::vector<fs::path> files;
            for (const auto& e : fs::recursive_directory_iterator(p)) {
                if (e.is_regular_file() && !e.path().filename().string().ends_with("manifest.json")) files.push_back(e.path());
            }
            std::sort(files.begin(), files.end());
            for (const auto& f : files) j_["inputs"][f.string()] = file_crc(f);
        } else {
            j_["inputs"][p.string()] = file_crc(p);
        }
    }
    void output(const fs::path& p) { j_["outputs"].push_back(p.filename().string()); }

    void write(const fs::path& dir) { write_to(dir / "manifest.json"); }
    void write_to(const fs::path& file) {
        j_["finished"] = utc_now();
        write_file(file, j_.dump(2) + "\n");
    }

private:
    json j_;
};

// ---------------------------------------------------------------------------
// Configuration

const std::set<std::string> kArchKeys{"preset", "embed_dim", "hidden_dim", "layers", "conditioning", "bottleneck"};

std::set<std::string> train_keys(const std::string& prefix = "") {
    std::set<std::string> keys;
    const auto defaults = TrainConfig{}.to_config(prefix);
    for (const auto& [k, v] : defaults.entries()) keys.insert(k);
    return keys;
}

const std::set<std::string> kRegimeKeys{"regimes",          "partitions",       "dev_languages",         "priors",
                                        "fewshot",          "univ_lambda_grid", "ninf_lambda_grid",      "fisher_prior_variance",
                                        "fisher_max_sequences", "seed"};

/// File entries first, then `--set key=value` overrides; every key must be known.
KeyValueConfig merged_config(const std::string& file, const std::vector<std::string>& sets, const std::set<std::string>& known) {
    KeyValueConfig c = file.empty() ? KeyValueConfig{} : KeyValueConfig::load(file);
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
        c.set(detail::trim(std::string_view{s}.substr(0, eq)), detail::trim(std::string_view{s}.substr(eq + 1)));
    }
    for (const auto& [k, v] : c.entries()) {
        if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
    }
    return c;
}

bool paper_preset(const KeyValueConfig& c) {
    const auto p = c.get_string("preset", "desk");
    if (p != "desk" && p != "paper") throw ConfigError("preset must be desk or paper, got '" + p + "'");
    return p == "paper";
}

ArchConfig arch_from(const KeyValueConfig& c, std::size_t vocab) {
    return ArchConfig::from_config(c, paper_preset(c) ? ArchConfig::paper(vocab) : ArchConfig::desk(vocab));
}

// ---------------------------------------------------------------------------
// Corpus, vocabulary and typology

/// Accepts either a directory of `<id>.txt` files or one holding `corpus/`.
std::vector<RawDataset> read_corpus(const fs::path& dir) {
    auto root = dir;
    if (fs::is_directory(dir / "corpus")) root = dir / "corpus";
    const auto ids = list_corpus_languages(root);
    if (ids.empty()) throw DataError("no <lang>.txt files in " + root.string());
    std::vector<RawDataset> out;
    for (const auto& id : ids) out.push_back(load_corpus(root / (id + ".txt"), id));
    return out;
}

std::string vocab_to_meta(const CharVocabulary& v) {
    std::string out;
    char buf[16];
    for (char32_t c : v.symbols()) {
        std::snprintf(buf, sizeof buf, "%x", static_cast<unsigned>(c));
        if (!out.empty()) out += ',';
        out += buf;
    }
    return out;
}

CharVocabulary vocab_from_meta(const KeyValueConfig& m) {
    if (!m.has("vocab")) throw DataError("checkpoint carries no vocabulary");
    std::vector<char32_t> symbols;
    for (const auto& h : m.get_list("vocab")) symbols.push_back(static_cast<char32_t>(std::stoul(h, nullptr, 16)));
    return CharVocabulary{std::move(symbols)};
}

std::optional<TypologyTable> read_typology(const std::string& path, const std::string& distances, std::size_t k) {
    if (path.empty()) return std::nullopt;
    auto table = load_typology(path);
    if (!distances.empty()) table = impute_missing(table, load_distance_matrix(distances), k);
    return table;
}

ExperimentData experiment(const std::vector<RawDataset>& raw, CharVocabulary vocab, std::uint64_t split_seed,
                          std::optional<TypologyTable> typology) {
    ExperimentData data;
    data.vocab = std::move(vocab);
    for (const auto& r : raw) data.datasets.push_back(split_dataset(r, data.vocab, split_seed));
    data.typology = std::move(typology);
    return data;
}

std::vector<std::string> parse_ids(const std::string& list) {
    std::vector<std::string> out;
    for (const auto& s : detail::split(list, ',')) {
        auto t = detail::trim(s);
        if (!t.empty()) out.push_back(std::move(t));
    }
    return out;
}

std::string join_ids(const std::vector<std::string>& ids) {
    std::string out;
    for (const auto& id : ids) out += (out.empty() ? "" : ",") + id;
    return out;
}

std::vector<std::string> all_ids(const ExperimentData& data) {
    std::vector<std::string> ids;
    for (const auto& d : data.datasets) ids.push_back(d.language_id);
    return ids;
}

/// Loads corpus and typology against a checkpoint's vocabulary and split seed.
ExperimentData experiment_for(const KeyValueConfig& meta, const std::string& corpus, const std::optional<TypologyTable>& typ) {
    const auto split_seed = static_cast<std::uint64_t>(meta.get_int("split_seed", 0));
    return experiment(read_corpus(corpus), vocab_from_meta(meta), split_seed, typ);
}

void require_typology(const ArchConfig& a, const std::optional<TypologyTable>& t) {
    if (a.conditioned() && !t) throw ConfigError(to_string(a.conditioning) + " model needs --typology");
}

fs::path prepare_out(const std::string& out) {
    if (out.empty()) throw ConfigError("--out is required");
    fs::create_directories(out);
    return out;
}

// ---------------------------------------------------------------------------
// Commands

struct Common {
    std::optional<std::uint64_t> seed_flag;
    std::size_t threads{1};
    std::vector<std::string> argv;

    [[nodiscard]] std::uint64_t seed() const {
        if (seed_flag) return *seed_flag;
        if (const char* env = std::getenv("UPLM_SEED"); env && *env) {
            return static_cast<std::uint64_t>(KeyValueConfig::to_int("UPLM_SEED", env));
        }
        return 0;
    }

    Manifest manifest(const std::string& cmd) const {
        Manifest m{cmd, argv};
        m.set("seed", std::to_string(seed()));
        m.set("threads", std::to_string(threads));
        return m;
    }
};

struct SynthArgs {
    std::string out;
    FamilySpec family;
};

int cmd_synth(const Common& g, SynthArgs a) {
    a.family.seed = g.seed();
    const auto dir = prepare_out(a.out);
    const auto fam = generate_synthetic_family(a.family);
    write_synthetic_family(fam, dir);
    auto m = g.manifest("synth");
    m.set("languages", std::to_string(a.family.languages));
    m.set("sentences", std::to_string(a.family.sentences));
    m.set("strength", num(a.family.strength));
    m.set("perturbations", std::to_string(a.family.perturbations));
    m.set("perturbed_contexts", std::to_string(a.family.perturbed_contexts));
    m.set("tilt", num(a.family.tilt));
    m.output(dir / "corpus");
    m.output(dir / "typology.tsv");
    m.write(dir);
    return 0;
}

struct TypologyArgs {
    std::string path;
    std::string distances;
    std::size_t k{10};

    [[nodiscard]] std::optional<TypologyTable> load() const { return read_typology(path, distances, k); }
    void record(Manifest& m) const {
        if (!path.empty()) m.input(path);
        if (!distances.empty()) m.input(distances);
    }
};

struct TrainArgs {
    std::string corpus, langs, config, out;
    std::vector<std::string> sets;
    TypologyArgs typology;
};

int cmd_train(const Common& g, const TrainArgs& a) {
    auto known = train_keys();
    known.insert(kArchKeys.begin(), kArchKeys.end());
    const auto cfg = merged_config(a.config, a.sets, known);
    const auto raw = read_corpus(a.corpus);
    const auto vocab = build_vocabulary(raw);
    const auto data = experiment(raw, vocab, g.seed(), a.typology.load());
    const auto ids = a.langs.empty() ? all_ids(data) : parse_ids(a.langs);
    if (ids.empty()) throw ConfigError("--langs is empty");

    const auto base = arch_from(cfg, vocab.size());
    const auto arch = detail::conditioned_arch(base, data, base.conditioning);
    auto tc = TrainConfig::from_config(cfg, paper_preset(cfg) ? TrainConfig::paper() : TrainConfig::desk());
    tc.seed = g.seed();
    const auto langs = detail::training_languages(data, ids, arch.conditioning);
    const auto result = train_mle(arch, langs, tc);

    const auto dir = prepare_out(a.out);
    KeyValueConfig meta;
    meta.set("vocab", vocab_to_meta(vocab));
    meta.set("split_seed", std::to_string(g.seed()));
    meta.set("languages", join_ids(ids));
    save_model(dir / "model.ckpt", result.params, meta);
    write_file(dir / "train_log.tsv", result.log.to_tsv());

    auto m = g.manifest("train");
    m.config(arch.to_config());
    m.config(tc.to_config());
    m.set("languages", join_ids(ids));
    m.input(a.corpus);
    if (!a.config.empty()) m.input(a.config);
    a.typology.record(m);
    m.output(dir / "model.ckpt");
    m.output(dir / "train_log.tsv");
    m.write(dir);
    std::cout << "trained " << result.epochs_run << " epochs";
    if (std::isfinite(result.best_dev_bpc)) std::cout << ", best dev BPC " << result.best_dev_bpc;
    std::cout << '\n';
    return 0;
}

struct FisherArgs {
    std::string model, corpus, langs, out;
    double sigma2{1.0};
    std::size_t max_sequences{0};
    TypologyArgs typology;
};

int cmd_fisher(const Common& g, const FisherArgs& a) {
    if (!(a.sigma2 > 0.0)) throw ConfigError("--sigma2 must be positive");
    const auto ckpt = load_model(a.model);
    const auto typ = a.typology.load();
    require_typology(ckpt.params.arch, typ);
    const auto data = experiment_for(ckpt.meta, a.corpus, typ);
    const auto ids = a.langs.empty() ? ckpt.meta.get_list("languages") : parse_ids(a.langs);
    if (ids.empty()) throw ConfigError("no languages for the Fisher pass; pass --langs");
    std::vector<FisherLanguage> fl;
    for (const auto& id : ids) {
        fl.push_back({id, data.dataset(id).train, data.typology_for(id, ckpt.params.arch.conditioning)});
    }
    const auto f = fisher_diagonal(ckpt.params, fl, FisherOptions{a.max_sequences, g.seed()});
    auto post = assemble_posterior(ckpt.params, f, a.sigma2);
    post.meta.merge(ckpt.meta);
    post.meta.set("fisher_languages", join_ids(ids));

    // A directory gets posterior.posterior and manifest.json; an explicit
    // *.posterior file gets a sibling <file>.manifest.json, so it can sit next
    // to the model without replacing that run's manifest.
    fs::path file{a.out};
    if (a.out.empty()) throw ConfigError("--out is required");
    const bool explicit_file = file.extension() == ".posterior";
    const fs::path dir = explicit_file ? (file.has_parent_path() ? file.parent_path() : fs::path{"."}) : file;
    if (!explicit_file) file = dir / "posterior.posterior";
    fs::create_directories(dir);
    save_posterior(file, post);

    auto m = g.manifest("fisher");
    m.set("sigma2", num(a.sigma2));
    m.set("max_sequences", std::to_string(a.max_sequences));
    m.set("languages", join_ids(ids));
    m.input(a.model);
    m.input(a.corpus);
    a.typology.record(m);
    m.output(file);
    if (explicit_file) {
        m.write_to(fs::path{file.string() + ".manifest.json"});
    } else {
        m.write(dir);
    }
    return 0;
}

struct FinetuneArgs {
    std::string posterior, model, objective{"univ"}, lang, corpus, config, out;
    std::optional<double> lambda;
    std::size_t fewshot{100};
    std::vector<std::string> sets;
    TypologyArgs typology;
};

int cmd_finetune(const Common& g, const FinetuneArgs& a) {
    const auto objective = parse_prior(a.objective);
    if (objective == PriorKind::univ && a.posterior.empty()) throw ConfigError("univ fine-tuning needs --posterior");
    if (a.posterior.empty() && a.model.empty()) throw ConfigError("pass --posterior or --model to fix the architecture");
    auto known = train_keys();
    known.insert("preset");
    const auto cfg = merged_config(a.config, a.sets, known);

    std::optional<LaplacePosterior> post;
    std::optional<ModelCheckpoint> start;
    if (!a.posterior.empty()) post = load_posterior(a.posterior);
    if (!a.model.empty()) start = load_model(a.model);
    const KeyValueConfig& meta = post ? post->meta : start->meta;
    const ArchConfig arch = post ? post->arch() : start->params.arch;
    const auto typ = a.typology.load();
    require_typology(arch, typ);
    const auto data = experiment_for(meta, a.corpus, typ);
    if (a.lang.empty()) throw ConfigError("--lang is required");

    const auto sample = sample_fewshot(data.dataset(a.lang), a.fewshot, g.seed());
    auto tc = TrainConfig::from_config(cfg, paper_preset(cfg) ? TrainConfig::paper_fewshot() : TrainConfig::desk_fewshot());
    tc.seed = g.seed();
    FinetuneConfig ft{objective, a.lambda, post ? &*post : nullptr, start ? &start->params : nullptr};
    ModelParameters params{arch};
    TrainLog log;
    if (sample.empty()) {
        params = ft.start ? *ft.start : zero_shot_parameters(objective, ft.posterior, arch, tc.seed);
    } else {
        const TrainingLanguage lang{a.lang, sample, {}, data.typology_for(a.lang, arch.conditioning)};
        auto r = finetune(arch, lang, ft, tc);
        params = std::move(r.params);
        log = std::move(r.log);
    }

    const auto dir = prepare_out(a.out);
    KeyValueConfig out_meta;
    for (const char* k : {"vocab", "split_seed"}) out_meta.set(k, meta.get_string(k, ""));
    out_meta.set("languages", a.lang);
    out_meta.set("lambda", num(ft.effective_lambda()));
    save_model(dir / "model.ckpt", params, out_meta);
    write_file(dir / "train_log.tsv", log.to_tsv());

    auto m = g.manifest("finetune");
    m.config(tc.to_config());
    m.set("objective", to_string(objective));
    m.set("lambda", num(ft.effective_lambda()));
    m.set("fewshot", std::to_string(a.fewshot));
    m.set("lang", a.lang);
    if (!a.posterior.empty()) m.input(a.posterior);
    if (!a.model.empty()) m.input(a.model);
    m.input(a.corpus);
    if (!a.config.empty()) m.input(a.config);
    a.typology.record(m);
    m.output(dir / "model.ckpt");
    m.output(dir / "train_log.tsv");
    m.write(dir);
    return 0;
}

struct EvalArgs {
    std::string model, corpus, split{"test"}, langs, out;
    bool no_carry{false};
    TypologyArgs typology;
};

int cmd_eval(const Common& g, const EvalArgs& a) {
    const auto ckpt = load_model(a.model);
    const auto typ = a.typology.load();
    require_typology(ckpt.params.arch, typ);
    const auto data = experiment_for(ckpt.meta, a.corpus, typ);
    const auto ids = a.langs.empty() ? all_ids(data) : parse_ids(a.langs);
    const auto cond = ckpt.params.arch.conditioning;

    ResultTable table;
    for (const auto& id : ids) {
        const auto& d = data.dataset(id);
        const auto& sentences = a.split == "train" ? d.train : a.split == "dev" ? d.dev : d.test;
        const auto t = data.typology_for(id, cond);
        table.add({id, "EVAL", "-", to_string(cond), bpc(ckpt.params, sentences, t, !a.no_carry)});
    }
    table.add_aggregates();
    std::cout << table.to_tsv();
    if (!a.out.empty()) {
        const auto dir = prepare_out(a.out);
        write_file(dir / "results.tsv", table.to_tsv());
        auto m = g.manifest("eval");
        m.set("split", a.split);
        m.set("carry_state", a.no_carry ? "false" : "true");
        m.set("languages", join_ids(ids));
        m.input(a.model);
        m.input(a.corpus);
        a.typology.record(m);
        m.output(dir / "results.tsv");
        m.write(dir);
    }
    return 0;
}

struct RegimeArgs {
    std::string spec, corpus, out;
    std::vector<std::string> sets;
    bool quiet{false};
    TypologyArgs typology;
};

int cmd_regime(const Common& g, const RegimeArgs& a) {
    auto known = train_keys();
    const auto fk = train_keys("fewshot.");
    known.insert(fk.begin(), fk.end());
    known.insert(kArchKeys.begin(), kArchKeys.end());
    known.insert(kRegimeKeys.begin(), kRegimeKeys.end());
    auto cfg = merged_config(a.spec, a.sets, known);
    if (g.seed_flag || !cfg.has("seed")) cfg.set("seed", std::to_string(g.seed()));
    const auto spec = RegimeSpec::from_config(cfg);

    const auto raw = read_corpus(a.corpus);
    const auto data = experiment(raw, build_vocabulary(raw), spec.seed, a.typology.load());
    const bool paper = paper_preset(cfg);
    RegimeConfigs rc;
    rc.arch = arch_from(cfg, data.vocab.size());
    rc.arch.conditioning = spec.conditioning;
    rc.train = TrainConfig::from_config(cfg, paper ? TrainConfig::paper() : TrainConfig::desk());
    rc.fewshot = TrainConfig::from_config(cfg, paper ? TrainConfig::paper_fewshot() : TrainConfig::desk_fewshot(), "fewshot.");

    ProgressFn progress;
    if (!a.quiet) progress = [](const std::string& s) { std::cerr << s << '\n'; };
    const auto result = run_regime(spec, data, rc, progress);

    const auto dir = prepare_out(a.out);
    auto m = g.manifest("regime");
    m.config(cfg);
    m.config(rc.train.to_config());
    m.config(rc.fewshot.to_config("fewshot."));
    write_file(dir / "results.tsv", result.table.to_tsv());
    m.output(dir / "results.tsv");
    KeyValueConfig meta;
    meta.set("vocab", vocab_to_meta(data.vocab));
    meta.set("split_seed", std::to_string(spec.seed));
    for (std::size_t i = 0; i < result.posteriors.size(); ++i) {
        auto post = result.posteriors[i];
        post.meta.merge(meta);
        const auto file = dir / ("posterior_" + std::to_string(i) + ".posterior");
        save_posterior(file, post);
        m.output(file);
    }
    if (result.joint_model) {
        save_model(dir / "joint.ckpt", *result.joint_model, meta);
        m.output(dir / "joint.ckpt");
    }
    if (!result.chosen_lambda.empty()) {
        std::ostringstream os;
        os << "partition\tprior\tlambda\n";
        for (const auto& [key, lambda] : result.chosen_lambda) os << key.first << '\t' << key.second << '\t' << num(lambda) << '\n';
        write_file(dir / "lambda.tsv", os.str());
        m.output(dir / "lambda.tsv");
    }
    m.input(a.spec);
    m.input(a.corpus);
    a.typology.record(m);
    m.write(dir);
    std::cout << result.table.to_tsv();
    return 0;
}

struct GenerateArgs {
    std::string model, lang, out;
    std::size_t length{25};
    std::size_t count{1};
    double temperature{1.0};
    TypologyArgs typology;
};

int cmd_generate(const Common& g, const GenerateArgs& a) {
    const auto ckpt = load_model(a.model);
    const auto vocab = vocab_from_meta(ckpt.meta);
    std::vector<double> t;
    if (ckpt.params.arch.conditioned()) {
        const auto typ = a.typology.load();
        require_typology(ckpt.params.arch, typ);
        if (a.lang.empty()) throw ConfigError("conditioned generation needs --lang");
        t = typ->at(a.lang).values;
        if (!typ->at(a.lang).complete()) throw DataError("typology vector for '" + a.lang + "' has missing values");
    }
    const auto seeds = Rng::stream(g.seed(), "samples");
    std::string text;
    for (std::size_t i = 0; i < a.count; ++i) {
        auto r = seeds.split(static_cast<std::uint64_t>(i));
        text += encode_utf8(sample_text(ckpt.params, vocab, {a.length, a.temperature, r()}, t)) + '\n';
    }
    std::cout << text;
    if (!a.out.empty()) {
        const auto dir = prepare_out(a.out);
        write_file(dir / "samples.txt", text);
        auto m = g.manifest("generate");
        m.set("length", std::to_string(a.length));
        m.set("count", std::to_string(a.count));
        m.set("temperature", num(a.temperature));
        m.input(a.model);
        m.output(dir / "samples.txt");
        m.write(dir);
    }
    return 0;
}

struct ProbeArgs {
    std::string posterior, out;
    std::size_t bins{40};
};

int cmd_probe_snr(const Common& g, const ProbeArgs& a) {
    const auto post = load_posterior(a.posterior);
    const auto values = snr(post);
    const auto text = format_histogram(log_histogram(values, a.bins));
    std::cout << text;
    if (!a.out.empty()) {
        const auto dir = prepare_out(a.out);
        write_file(dir / "snr_histogram.tsv", text);
        auto m = g.manifest("probe snr");
        m.set("bins", std::to_string(a.bins));
        m.input(a.posterior);
        m.output(dir / "snr_histogram.tsv");
        m.write(dir);
    }
    return 0;
}

struct AnalyzeArgs {
    std::string corpus, results, out;
    std::string regime, prior, conditioning;
};

int cmd_analyze_chardist(const Common& g, const AnalyzeArgs& a) {
    const auto raw = read_corpus(a.corpus);
    const auto data = experiment(raw, build_vocabulary(raw), g.seed(), std::nullopt);
    const auto table = ResultTable::parse_tsv(read_file(a.results));
    std::map<std::string, double> by_lang;
    for (const auto& r : table.rows()) {
        if (r.language == ResultTable::all_label) continue;
        if (!a.regime.empty() && r.regime != a.regime) continue;
        if (!a.prior.empty() && r.prior != a.prior) continue;
        if (!a.conditioning.empty() && r.conditioning != a.conditioning) continue;
        if (!by_lang.emplace(r.language, r.bpc).second) {
            throw ConfigError("several result rows for '" + r.language + "'; narrow with --regime/--prior/--conditioning");
        }
    }
    std::vector<std::string> ids;
    std::vector<std::vector<double>> counts;
    for (const auto& [id, b] : by_lang) {
        ids.push_back(id);
        counts.push_back(unigram_distribution(data.dataset(id), data.vocab));
    }
    const auto r = char_distance_analysis(ids, counts, by_lang);
    std::ostringstream os;
    os.precision(17);
    os << "language\tdistance\tbpc\n";
    for (std::size_t i = 0; i < r.n; ++i) os << r.language_ids[i] << '\t' << r.distances[i] << '\t' << r.bpc[i] << '\n';
    os << "# rho\t" << r.rho << "\tn\t" << r.n << '\n';
    std::cout << os.str();
    if (!a.out.empty()) {
        const auto dir = prepare_out(a.out);
        write_file(dir / "chardist.tsv", os.str());
        auto m = g.manifest("analyze chardist");
        m.input(a.corpus);
        m.input(a.results);
        m.output(dir / "chardist.tsv");
        m.write(dir);
    }
    return 0;
}

int run(int argc, char** argv);

/// Replays a manifest's recorded command line, optionally into a new --out.
int cmd_rerun(const std::string& manifest, const std::string& out) {
    json j;
    try {
        j = json::parse(read_file(manifest));
    } catch (const json::exception& e) {
        throw DataError(manifest + ": " + e.what());
    }
    if (!j.contains("argv") || !j["argv"].is_array()) throw DataError(manifest + ": no recorded command line");
    std::vector<std::string> args{"uplm"};
    for (const auto& v : j["argv"]) args.push_back(v.get<std::string>());
    // A seed taken from $UPLM_SEED is pinned so the replay does not depend on the environment.
    if (std::find(args.begin(), args.end(), "--seed") == args.end() && j["config"].contains("seed")) {
        args.insert(args.begin() + 1, {"--seed", j["config"]["seed"].get<std::string>()});
    }
    if (!out.empty()) {
        // Relative to the caller, not to the recorded working directory.
        const auto abs_out = fs::absolute(out).string();
        bool replaced = false;
        for (std::size_t i = 1; i + 1 < args.size(); ++i) {
            if (args[i] == "--out") args[i + 1] = abs_out, replaced = true;
        }
        if (!replaced) throw ConfigError("the recorded command has no --out to replace");
    }
    if (j.contains("cwd")) fs::current_path(j["cwd"].get<std::string>());
    std::vector<char*> ptrs;
    for (auto& s : args) ptrs.push_back(s.data());
    return run(static_cast<int>(ptrs.size()), ptrs.data());
}

void add_typology(CLI::App* c, TypologyArgs& t) {
    c->add_option("--typology", t.path, "Typology feature table (TSV)");
    c->add_option("--distances", t.distances, "Language distance matrix used to impute missing features");
    c->add_option("--impute-k", t.k, "Neighbours for imputation")->check(CLI::PositiveNumber);
}

int run(int argc, char** argv) {
    CLI::App app{"Universal-prior character language models"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);
    Common g;
    for (int i = 1; i < argc; ++i) g.argv.emplace_back(argv[i]);
    std::uint64_t seed = 0;
    auto* seed_opt = app.add_option("--seed", seed, "Seed for every random stream (default: $UPLM_SEED or 0)");
    app.add_option("--threads", g.threads, "Worker cap")->check(CLI::PositiveNumber);

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "Generate a synthetic language family with truthful typology flags");
    c_synth->add_option("--out", synth.out, "Output directory")->required();
    c_synth->add_option("--languages", synth.family.languages, "Number of languages");
    c_synth->add_option("--sentences", synth.family.sentences, "Sentences per language");
    c_synth->add_option("--strength", synth.family.strength, "Perturbation strength in [0, 1]");
    c_synth->add_option("--perturbations", synth.family.perturbations, "Shared perturbations (one flag each)");
    c_synth->add_option("--contexts", synth.family.perturbed_contexts, "Contexts rewritten per perturbation");
    c_synth->add_option("--tilt", synth.family.tilt, "Unigram boost (1 + tilt) of each active perturbation's symbols");

    TrainArgs train;
    auto* c_train = app.add_subcommand("train", "Maximum-likelihood training over several languages");
    c_train->add_option("--corpus", train.corpus, "Directory of <lang>.txt files")->required();
    c_train->add_option("--langs", train.langs, "Comma-separated training languages (default: all)");
    c_train->add_option("--config", train.config, "key = value config file");
    c_train->add_option("--set", train.sets, "Override one config key (key=value)");
    c_train->add_option("--out", train.out, "Output directory")->required();
    add_typology(c_train, train.typology);

    FisherArgs fisher;
    auto* c_fisher = app.add_subcommand("fisher", "Diagonal Fisher and Laplace posterior around a trained model");
    c_fisher->add_option("--model", fisher.model, "Model checkpoint")->required();
    c_fisher->add_option("--corpus", fisher.corpus, "Directory of <lang>.txt files")->required();
    c_fisher->add_option("--langs", fisher.langs, "Languages to sum over (default: the model's training languages)");
    c_fisher->add_option("--sigma2", fisher.sigma2, "Prior variance");
    c_fisher->add_option("--max-sequences", fisher.max_sequences, "Seeded subsample per language (0: all)");
    c_fisher->add_option("--out", fisher.out, "Posterior file (*.posterior) or directory")->required();
    add_typology(c_fisher, fisher.typology);

    FinetuneArgs ft;
    double lambda = 0.0;
    auto* c_ft = app.add_subcommand("finetune", "Few-shot MAP fine-tuning on one language");
    c_ft->add_option("--posterior", ft.posterior, "Posterior file (required for univ)");
    c_ft->add_option("--model", ft.model, "Starting checkpoint (overrides the objective's default start)");
    c_ft->add_option("--objective", ft.objective, "univ, ninf or fitu");
    auto* lambda_opt = c_ft->add_option("--lambda", lambda, "Penalty weight (default 1e5 univ, 1e-5 ninf)");
    c_ft->add_option("--fewshot", ft.fewshot, "Training sentences sampled from the language");
    c_ft->add_option("--lang", ft.lang, "Target language")->required();
    c_ft->add_option("--corpus", ft.corpus, "Directory of <lang>.txt files")->required();
    c_ft->add_option("--config", ft.config, "key = value config file for the fine-tuning loop");
    c_ft->add_option("--set", ft.sets, "Override one config key (key=value)");
    c_ft->add_option("--out", ft.out, "Output directory")->required();
    add_typology(c_ft, ft.typology);

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "Bits per character on a split");
    c_eval->add_option("--model", ev.model, "Model checkpoint")->required();
    c_eval->add_option("--corpus", ev.corpus, "Directory of <lang>.txt files")->required();
    c_eval->add_option("--split", ev.split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));
    c_eval->add_option("--langs", ev.langs, "Comma-separated languages (default: all)");
    c_eval->add_flag("--no-carry", ev.no_carry, "Reset the recurrent state at every sentence");
    c_eval->add_option("--out", ev.out, "Also write results.tsv and a manifest here");
    add_typology(c_eval, ev.typology);

    RegimeArgs reg;
    auto* c_reg = app.add_subcommand("regime", "Run ZERO_SHOT / FEW_SHOT / JOINT experiments from a spec file");
    c_reg->add_option("--spec", reg.spec, "key = value spec file")->required();
    c_reg->add_option("--corpus", reg.corpus, "Directory of <lang>.txt files")->required();
    c_reg->add_option("--set", reg.sets, "Override one spec key (key=value)");
    c_reg->add_option("--out", reg.out, "Output directory")->required();
    c_reg->add_flag("--quiet", reg.quiet, "No progress on stderr");
    add_typology(c_reg, reg.typology);

    GenerateArgs gen;
    auto* c_gen = app.add_subcommand("generate", "Sample text from a model");
    c_gen->add_option("--model", gen.model, "Model checkpoint")->required();
    c_gen->add_option("--length", gen.length, "Characters per sample");
    c_gen->add_option("--count", gen.count, "Number of samples");
    c_gen->add_option("--temperature", gen.temperature, "Softmax temperature (0: greedy)")->check(CLI::NonNegativeNumber);
    c_gen->add_option("--lang", gen.lang, "Language whose typology conditions the model");
    c_gen->add_option("--out", gen.out, "Also write samples.txt and a manifest here");
    add_typology(c_gen, gen.typology);

    ProbeArgs probe;
    auto* c_probe = app.add_subcommand("probe", "Posterior probes");
    c_probe->require_subcommand(1);
    auto* c_snr = c_probe->add_subcommand("snr", "Log-spaced histogram of per-parameter signal-to-noise ratios");
    c_snr->add_option("--posterior", probe.posterior, "Posterior file")->required();
    c_snr->add_option("--bins", probe.bins, "Histogram bins")->check(CLI::PositiveNumber);
    c_snr->add_option("--out", probe.out, "Also write snr_histogram.tsv and a manifest here");

    AnalyzeArgs an;
    auto* c_an = app.add_subcommand("analyze", "Result analyses");
    c_an->require_subcommand(1);
    auto* c_cd = c_an->add_subcommand("chardist", "Correlate BPC with character-distribution distance");
    c_cd->add_option("--corpus", an.corpus, "Directory of <lang>.txt files")->required();
    c_cd->add_option("--results", an.results, "Result table TSV")->required();
    c_cd->add_option("--regime", an.regime, "Keep rows of this regime");
    c_cd->add_option("--prior", an.prior, "Keep rows of this prior");
    c_cd->add_option("--conditioning", an.conditioning, "Keep rows of this conditioning");
    c_cd->add_option("--out", an.out, "Also write chardist.tsv and a manifest here");

    std::string rerun_manifest, rerun_out;
    auto* c_rerun = app.add_subcommand("rerun", "Replay the command recorded in a manifest");
    c_rerun->add_option("--manifest", rerun_manifest, "manifest.json")->required();
    c_rerun->add_option("--out", rerun_out, "Replace the recorded --out");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    if (seed_opt->count() > 0) g.seed_flag = seed;
    Eigen::setNbThreads(static_cast<int>(g.threads));

    if (*c_synth) return cmd_synth(g, synth);
    if (*c_train) return cmd_train(g, train);
    if (*c_fisher) return cmd_fisher(g, fisher);
    if (*c_ft) {
        if (lambda_opt->count() > 0) ft.lambda = lambda;
        return cmd_finetune(g, ft);
    }
    if (*c_eval) return cmd_eval(g, ev);
    if (*c_reg) return cmd_regime(g, reg);
    if (*c_gen) return cmd_generate(g, gen);
    if (*c_snr) return cmd_probe_snr(g, probe);
    if (*c_cd) return cmd_analyze_chardist(g, an);
    if (*c_rerun) return cmd_rerun(rerun_manifest, rerun_out);
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
