#include <catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "json.hpp"
#include "uplm/laplace.hpp"

namespace fs = std::filesystem;

#ifndef UPLM_CLI_PATH
#error "UPLM_CLI_PATH must name the uplm executable"
#endif

namespace {

struct Run {
    int code{0};
    std::string out;
    std::string err;
};

struct ScratchDir {
    fs::path path;
    ScratchDir() : path{fs::temp_directory_path() / ("uplm_cli_" + std::to_string(::getpid()))} {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~ScratchDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

const fs::path& workdir() {
    static const ScratchDir dir;
    return dir.path;
}

std::string slurp(const fs::path& p) {
    std::ifstream in{p, std::ios::binary};
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

Run cli(const std::string& args, const std::string& env = "") {
    const auto err_file = workdir() / "stderr.txt";
    const std::string cmd = "cd '" + workdir().string() + "' && " + env + " '" + UPLM_CLI_PATH + "' " + args + " 2>'" +
                            err_file.string() + "'";
    Run r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    REQUIRE(pipe);
    char buf[4096];
    std::size_t n = 0;
    while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = slurp(err_file);
    return r;
}

void write(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream out{p, std::ios::binary};
    out << text;
}

/// A small family plus a tiny model config, built once.
void ensure_family() {
    static bool done = false;
    if (done) return;
    REQUIRE(cli("--seed 3 synth --out fam --languages 4 --sentences 60").code == 0);
    write(workdir() / "tiny.cfg", "embed_dim = 6\nhidden_dim = 8\nmax_epochs = 2\nlength_mean = 30\n");
    REQUIRE(cli("--seed 3 train --corpus fam --langs s00,s01,s02 --config tiny.cfg --out tr").code == 0);
    REQUIRE(cli("--seed 3 fisher --model tr/model.ckpt --corpus fam --out post").code == 0);
    done = true;
}

}  // namespace

TEST_CASE("help lists every command and global flag") {
    const auto r = cli("--help");
    CHECK(r.code == 0);
    for (const char* s : {"--seed", "--threads", "synth", "train", "fisher", "finetune", "eval", "regime", "generate", "probe",
                          "analyze", "rerun"}) {
        CHECK(r.out.find(s) != std::string::npos);
    }
    const auto t = cli("train --help");
    for (const char* s : {"--corpus", "--langs", "--config", "--set", "--out", "--typology"}) CHECK(t.out.find(s) != std::string::npos);
}

TEST_CASE("unknown flags and bad configs exit 2") {
    ensure_family();
    CHECK(cli("eval --bogus").code == 2);
    CHECK(cli("frobnicate").code == 2);
    CHECK(cli("train --corpus fam --set nonsense=1 --out bad").code == 2);
    CHECK(cli("train --corpus fam --set preset=huge --out bad").code == 2);
    CHECK(cli("fisher --model tr/model.ckpt --corpus fam --sigma2 0 --out bad").code == 2);
    const auto r = cli("finetune --objective univ --lang s03 --corpus fam --model tr/model.ckpt --out bad");
    CHECK(r.code == 2);
    CHECK(r.err.find("posterior") != std::string::npos);
}

TEST_CASE("data errors exit 3 and name the path") {
    const auto r = cli("train --corpus no_such_dir --out bad");
    CHECK(r.code == 3);
    CHECK(r.err.find("no_such_dir") != std::string::npos);

    ensure_family();
    // Two sentences cannot fill train, dev and test.
    write(workdir() / "tiny_corpus" / "s00.txt", "abc\ncab\n");
    CHECK(cli("eval --model tr/model.ckpt --corpus tiny_corpus").code == 3);
    CHECK(cli("eval --model tr/posterior_missing.ckpt --corpus fam").code == 3);
    CHECK(cli("eval --model tr/model.ckpt --corpus fam --langs zzz").code == 3);
}

TEST_CASE("train writes a checkpoint, a log and one manifest") {
    ensure_family();
    for (const char* f : {"model.ckpt", "train_log.tsv", "manifest.json"}) CHECK(fs::exists(workdir() / "tr" / f));
    const auto m = nlohmann::json::parse(slurp(workdir() / "tr" / "manifest.json"));
    CHECK(m["command"] == "train");
    CHECK(m["config"]["seed"] == "3");
    CHECK(m["config"]["embed_dim"] == "6");
    CHECK(m["inputs"].contains("tiny.cfg"));
    CHECK(slurp(workdir() / "tr" / "train_log.tsv").starts_with("epoch\tsplit"));
}

TEST_CASE("training is byte-reproducible, also through UPLM_SEED") {
    ensure_family();
    REQUIRE(cli("--seed 3 train --corpus fam --langs s00,s01,s02 --config tiny.cfg --out tr2").code == 0);
    REQUIRE(cli("train --corpus fam --langs s00,s01,s02 --config tiny.cfg --out tr3", "UPLM_SEED=3").code == 0);
    REQUIRE(cli("--seed 4 train --corpus fam --langs s00,s01,s02 --config tiny.cfg --out tr4").code == 0);
    const auto a = slurp(workdir() / "tr" / "model.ckpt");
    CHECK(a == slurp(workdir() / "tr2" / "model.ckpt"));
    CHECK(a == slurp(workdir() / "tr3" / "model.ckpt"));
    CHECK(a != slurp(workdir() / "tr4" / "model.ckpt"));
    CHECK(slurp(workdir() / "tr" / "train_log.tsv") == slurp(workdir() / "tr2" / "train_log.tsv"));
}

TEST_CASE("fisher writes a loadable posterior and reruns identically") {
    ensure_family();
    const auto post = uplm::load_posterior(workdir() / "post" / "posterior.posterior");
    for (std::size_t i = 0; i < post.fisher.size(); ++i) REQUIRE(post.fisher[i] >= 0.0);
    CHECK(post.prior_variance == 1.0);
    REQUIRE(cli("--seed 3 fisher --model tr/model.ckpt --corpus fam --out post2/w.posterior").code == 0);
    CHECK(slurp(workdir() / "post" / "posterior.posterior") == slurp(workdir() / "post2" / "w.posterior"));
    CHECK(fs::exists(workdir() / "post2" / "w.posterior.manifest.json"));
}

TEST_CASE("fine-tuning objectives") {
    ensure_family();
    const std::string common = "--seed 5 finetune --posterior post/posterior.posterior --lang s03 --corpus fam --fewshot 8 --set max_epochs=2 ";
    REQUIRE(cli(common + "--objective univ --lambda 0 --out ft_univ0").code == 0);
    REQUIRE(cli(common + "--objective fitu --lambda 0 --out ft_fitu").code == 0);
    REQUIRE(cli(common + "--objective univ --out ft_univ").code == 0);
    CHECK(slurp(workdir() / "ft_univ0" / "model.ckpt") == slurp(workdir() / "ft_fitu" / "model.ckpt"));
    CHECK(slurp(workdir() / "ft_univ0" / "model.ckpt") != slurp(workdir() / "ft_univ" / "model.ckpt"));

    REQUIRE(cli("--seed 5 finetune --objective ninf --model tr/model.ckpt --lang s03 --corpus fam --fewshot 8 --set max_epochs=1 --out ft_ninf").code == 0);
    const auto m = nlohmann::json::parse(slurp(workdir() / "ft_ninf" / "manifest.json"));
    CHECK(std::stod(m["config"]["lambda"].get<std::string>()) == 1e-5);
    CHECK(m["config"]["objective"] == "NINF");
}

TEST_CASE("eval and chardist analysis") {
    ensure_family();
    const auto r = cli("eval --model tr/model.ckpt --corpus fam --out ev");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("s03\tEVAL\t-\tBARE\t") != std::string::npos);
    CHECK(r.out.find("All\tEVAL") != std::string::npos);
    CHECK(slurp(workdir() / "ev" / "results.tsv") == r.out);
    const auto a = cli("analyze chardist --corpus fam --results ev/results.tsv");
    REQUIRE(a.code == 0);
    CHECK(a.out.find("# rho\t") != std::string::npos);
    CHECK(a.out.find("\tn\t4") != std::string::npos);
}

TEST_CASE("generation on a one-symbol vocabulary repeats that symbol") {
    write(workdir() / "mono" / "aaa.txt", "aaaa\naa\naaaaaa\naaa\n");
    REQUIRE(cli("train --corpus mono --set embed_dim=4 --set hidden_dim=4 --set max_epochs=0 --out mono_model").code == 0);
    const auto r = cli("generate --model mono_model/model.ckpt --length 25");
    REQUIRE(r.code == 0);
    CHECK(r.out == std::string(25, 'a') + "\n");
}

TEST_CASE("generation is reproducible per seed") {
    ensure_family();
    const auto a = cli("--seed 9 generate --model tr/model.ckpt --count 4 --length 25");
    const auto b = cli("--seed 9 generate --model tr/model.ckpt --count 4 --length 25");
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
    CHECK(std::count(a.out.begin(), a.out.end(), '\n') == 4);
}

TEST_CASE("probe snr histogram counts every parameter") {
    ensure_family();
    const auto r = cli("probe snr --posterior post/posterior.posterior --bins 7");
    REQUIRE(r.code == 0);
    std::istringstream in{r.out};
    std::string line;
    std::getline(in, line);
    CHECK(line == "lo\thi\tcount");
    std::size_t total = 0, rows = 0;
    while (std::getline(in, line)) {
        total += std::stoul(line.substr(line.rfind('\t') + 1));
        ++rows;
    }
    CHECK(rows == 8);
    CHECK(total == uplm::load_posterior(workdir() / "post" / "posterior.posterior").size());
}

TEST_CASE("regime runs are byte-reproducible") {
    ensure_family();
    write(workdir() / "spec.cfg",
          "regimes = zero_shot, few_shot\npartitions = s03\ndev_languages = 1\nfewshot = 6\n"
          "univ_lambda_grid = 1\nembed_dim = 6\nhidden_dim = 8\nmax_epochs = 1\nlength_mean = 30\nfewshot.max_epochs = 2\n");
    REQUIRE(cli("--seed 2 regime --spec spec.cfg --corpus fam --quiet --out reg1").code == 0);
    REQUIRE(cli("--seed 2 regime --spec spec.cfg --corpus fam --quiet --out reg2").code == 0);
    for (const char* f : {"results.tsv", "posterior_0.posterior", "lambda.tsv"}) {
        CHECK(slurp(workdir() / "reg1" / f) == slurp(workdir() / "reg2" / f));
    }
    const auto tsv = slurp(workdir() / "reg1" / "results.tsv");
    CHECK(tsv.find("s03\tZERO_SHOT\tUNIV\tBARE") != std::string::npos);
    CHECK(tsv.find("s03\tFEW_SHOT\tFITU\tBARE") != std::string::npos);
}

TEST_CASE("rerun replays a manifest byte for byte") {
    ensure_family();
    REQUIRE(cli("rerun --manifest tr/manifest.json --out tr_rerun").code == 0);
    CHECK(slurp(workdir() / "tr" / "model.ckpt") == slurp(workdir() / "tr_rerun" / "model.ckpt"));
    REQUIRE(cli("--seed 1 synth --out fam_a --languages 3 --sentences 20", "UPLM_SEED=99").code == 0);
    REQUIRE(cli("rerun --manifest fam_a/manifest.json --out fam_b").code == 0);
    CHECK(slurp(workdir() / "fam_a" / "corpus" / "s01.txt") == slurp(workdir() / "fam_b" / "corpus" / "s01.txt"));
    CHECK(slurp(workdir() / "fam_a" / "typology.tsv") == slurp(workdir() / "fam_b" / "typology.tsv"));
    CHECK(cli("rerun --manifest no_such.json").code == 3);
}
