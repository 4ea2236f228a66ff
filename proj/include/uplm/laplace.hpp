#pragma once

// Diagonal Laplace posterior over model weights: the observed Fisher diagonal,
// the assembled precision, the signal-to-noise probe and binary checkpoints.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <zlib.h>

#include "uplm/config.hpp"
#include "uplm/corpus.hpp"
#include "uplm/errors.hpp"
#include "uplm/model.hpp"
#include "uplm/numerics.hpp"

namespace uplm {

// ---------------------------------------------------------------------------
// Fisher diagonal

struct FisherLanguage {
    std::string language_id;
    std::span<const Sentence> sequences;
    /// Empty for BARE models.
    std::vector<double> typology;
};

struct FisherOptions {
    /// 0 keeps every sequence; otherwise a seeded subset of this size per language.
    std::size_t max_sequences_per_language{0};
    std::uint64_t seed{0};
};

/// f = sum_l sum_{x in D_l} (grad log p(x | w))^2 / (|T| |D_l|), one gradient
/// per whole sentence from a zero state, no dropout. Languages are visited in
/// id order and sentences in lexicographic order, so the result does not depend
/// on how the inputs are ordered.
inline Tensor fisher_diagonal(const ModelParameters& w_star, std::span<const FisherLanguage> languages,
                              const FisherOptions& opt = {}) {
    if (languages.empty()) throw DataError("fisher_diagonal: no languages");
    if (!w_star.flat.all_finite()) throw NumericError("fisher_diagonal: parameters are not finite");
    std::vector<const FisherLanguage*> order;
    for (const auto& l : languages) order.push_back(&l);
    std::sort(order.begin(), order.end(),
              [](const FisherLanguage* a, const FisherLanguage* b) { return a->language_id < b->language_id; });

    const std::size_t P = w_star.size();
    Tensor f{{P}, 0.0};
    AlignedVector g(P), acc(P);
    const double T = static_cast<double>(order.size());
    for (const auto* lang : order) {
        if (lang->sequences.empty()) throw DataError("fisher_diagonal: language '" + lang->language_id + "' has no sequences");
        std::vector<const Sentence*> seqs;
        for (const auto& s : lang->sequences) seqs.push_back(&s);
        std::sort(seqs.begin(), seqs.end(), [](const Sentence* a, const Sentence* b) { return *a < *b; });
        if (opt.max_sequences_per_language > 0 && seqs.size() > opt.max_sequences_per_language) {
            auto rng = Rng::stream(opt.seed, "fisher").split(lang->language_id);
            for (std::size_t i = 0; i < opt.max_sequences_per_language; ++i) {
                std::swap(seqs[i], seqs[i + rng.below(seqs.size() - i)]);
            }
            seqs.resize(opt.max_sequences_per_language);
            std::sort(seqs.begin(), seqs.end(), [](const Sentence* a, const Sentence* b) { return *a < *b; });
        }

        ModelRunner runner{w_star, lang->typology};
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t k = 0; k < seqs.size(); ++k) {
            const auto seg = make_single_segment(*seqs[k]);
            runner.reset_gradient();
            LstmState state;
            runner.accumulate(seg, state, DropoutPlan::eval(), 1.0);
            std::fill(g.begin(), g.end(), 0.0);
            runner.add_gradient_to(g);
            for (std::size_t i = 0; i < P; ++i) {
                if (!std::isfinite(g[i])) {
                    throw NumericError("non-finite gradient for sequence " + std::to_string(k) + " of language '" +
                                       lang->language_id + "' in block " + w_star.layout.block_of(i).name);
                }
                acc[i] += g[i] * g[i];
            }
        }
        const double w = 1.0 / (T * static_cast<double>(seqs.size()));
        for (std::size_t i = 0; i < P; ++i) f[i] += w * acc[i];
    }
    return f;
}

// ---------------------------------------------------------------------------
// Posterior

struct LaplacePosterior {
    ParameterLayout layout;
    Tensor mean;
    Tensor fisher;
    double prior_variance{1.0};
    /// Architecture and provenance keys carried through checkpoints.
    KeyValueConfig meta;

    [[nodiscard]] std::size_t size() const noexcept { return mean.size(); }

    /// f + 1/sigma^2, the negated diagonal of H~.
    [[nodiscard]] std::vector<double> precision_diag() const {
        std::vector<double> p(fisher.size());
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = fisher[i] + 1.0 / prior_variance;
        return p;
    }

    [[nodiscard]] std::vector<double> h_tilde_diag() const {
        auto p = precision_diag();
        for (double& x : p) x = -x;
        return p;
    }

    [[nodiscard]] std::vector<double> variance_diag() const {
        auto p = precision_diag();
        for (double& x : p) x = 1.0 / x;
        return p;
    }

    [[nodiscard]] ArchConfig arch() const { return ArchConfig::from_config(meta); }

    /// The mean as model parameters; the stored layout must match the architecture.
    [[nodiscard]] ModelParameters mean_parameters() const {
        ModelParameters p{arch()};
        if (p.layout.blocks() != layout.blocks()) throw DataError("posterior layout does not match its architecture");
        std::copy(mean.values().begin(), mean.values().end(), p.flat.data());
        return p;
    }
};

inline LaplacePosterior assemble_posterior(Tensor w_star, Tensor fisher, double prior_variance, ParameterLayout layout = {}) {
    if (!(prior_variance > 0.0) || !std::isfinite(prior_variance)) {
        throw ConfigError("prior variance must be positive and finite");
    }
    if (w_star.size() != fisher.size()) throw std::invalid_argument("assemble_posterior: mean and Fisher differ in size");
    for (std::size_t i = 0; i < fisher.size(); ++i) {
        if (!(fisher[i] >= 0.0) || !std::isfinite(fisher[i])) {
            throw NumericError("Fisher entry " + std::to_string(i) + " is negative or not finite");
        }
    }
    if (layout.blocks().empty()) layout.add("w", w_star.size(), 1);
    if (layout.total_size() != w_star.size()) throw std::invalid_argument("assemble_posterior: layout size mismatch");
    LaplacePosterior post;
    post.layout = std::move(layout);
    post.mean = std::move(w_star);
    post.fisher = std::move(fisher);
    post.prior_variance = prior_variance;
    return post;
}

inline LaplacePosterior assemble_posterior(const ModelParameters& w_star, Tensor fisher, double prior_variance) {
    auto post = assemble_posterior(w_star.flat, std::move(fisher), prior_variance, w_star.layout);
    post.meta = w_star.arch.to_config();
    return post;
}

// ---------------------------------------------------------------------------
// Signal-to-noise probe

/// |w*_i| * sqrt(f_i + 1/sigma^2), i.e. |mean| / posterior standard deviation.
inline std::vector<double> snr(const LaplacePosterior& post) {
    std::vector<double> out(post.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::abs(post.mean[i]) * std::sqrt(post.fisher[i] + 1.0 / post.prior_variance);
    }
    return out;
}

struct HistogramBin {
    double lo{0.0};
    double hi{0.0};
    std::size_t count{0};
};

/// Exact zeros go to a leading [0, 0] bin; positive values fall into `bins`
/// bins equally spaced in log10 between the smallest and largest value.
inline std::vector<HistogramBin> log_histogram(std::span<const double> values, std::size_t bins = 40) {
    if (bins < 1) throw std::invalid_argument("log_histogram: need at least one bin");
    std::vector<HistogramBin> out{HistogramBin{}};
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (double v : values) {
        if (v > 0.0) lo = std::min(lo, v), hi = std::max(hi, v);
    }
    if (hi == 0.0) {
        out[0].count = values.size();
        return out;
    }
    const double a = std::log10(lo), b = std::log10(hi);
    const double width = b > a ? (b - a) / static_cast<double>(bins) : 1.0;
    for (std::size_t k = 0; k < bins; ++k) {
        out.push_back({std::pow(10.0, a + width * static_cast<double>(k)), std::pow(10.0, a + width * static_cast<double>(k + 1)), 0});
    }
    for (double v : values) {
        if (!(v > 0.0)) {
            ++out[0].count;
            continue;
        }
        auto k = static_cast<std::size_t>((std::log10(v) - a) / width);
        k = std::min(k, bins - 1);
        ++out[k + 1].count;
    }
    return out;
}

inline std::string format_histogram(std::span<const HistogramBin> bins) {
    std::ostringstream os;
    os.precision(10);
    os << "lo\thi\tcount\n";
    for (const auto& b : bins) os << b.lo << '\t' << b.hi << '\t' << b.count << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout on disk, all integers and reals little-endian:
//   "UPLMCKPT" | u32 version | u32 kind | u64 body length | body | u32 CRC32
// The CRC covers every byte before it. The body holds the metadata as
// `key=value` lines, the block table, and the float64 arrays.

inline constexpr std::uint32_t kCheckpointVersion = 1;
enum class CheckpointKind : std::uint32_t { model = 1, posterior = 2 };

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class ByteWriter {
public:
    template <class T>
    void put(T v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }
    void put_string(std::string_view s) {
        put<std::uint64_t>(s.size());
        bytes_.insert(bytes_.end(), s.begin(), s.end());
    }
    void put_array(std::span<const double> a) {
        put<std::uint64_t>(a.size());
        const auto* p = reinterpret_cast<const char*>(a.data());
        bytes_.insert(bytes_.end(), p, p + a.size() * sizeof(double));
    }
    std::vector<char>& bytes() { return bytes_; }

private:
    std::vector<char> bytes_;
};

class ByteReader {
public:
    ByteReader(std::span<const char> bytes, std::string origin) : b_{bytes}, origin_{std::move(origin)} {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, b_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_string() {
        const auto n = get<std::uint64_t>();
        need(n);
        std::string s{b_.data() + pos_, static_cast<std::size_t>(n)};
        pos_ += n;
        return s;
    }
    std::vector<double> get_array() {
        const auto n = get<std::uint64_t>();
        if (n > (b_.size() - pos_) / sizeof(double)) fail("array length exceeds file");
        std::vector<double> a(n);
        std::memcpy(a.data(), b_.data() + pos_, n * sizeof(double));
        pos_ += n * sizeof(double);
        return a;
    }
    [[nodiscard]] bool done() const { return pos_ == b_.size(); }
    [[noreturn]] void fail(const std::string& what) const { throw DataError(origin_ + ": " + what); }

private:
    void need(std::size_t n) const {
        if (n > b_.size() - pos_) fail("unexpected end of checkpoint body");
    }
    std::span<const char> b_;
    std::size_t pos_{0};
    std::string origin_;
};

inline std::uint32_t crc32_of(std::span<const char> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed large buffers in chunks.
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), n);
        off += n;
    }
    return static_cast<std::uint32_t>(crc);
}

inline std::string format_meta(const KeyValueConfig& meta) {
    std::string out;
    for (const auto& [k, v] : meta.entries()) {
        if (k.find_first_of("=\n#") != std::string::npos || v.find_first_of("\n#") != std::string::npos) {
            throw ConfigError("checkpoint metadata '" + k + "' contains a reserved character");
        }
        out += k + "=" + v + "\n";
    }
    return out;
}

struct RawCheckpoint {
    CheckpointKind kind{CheckpointKind::model};
    KeyValueConfig meta;
    ParameterLayout layout;
    std::vector<double> mean;
    std::vector<double> fisher;
    double prior_variance{0.0};
};

inline void write_checkpoint(const std::filesystem::path& path, const RawCheckpoint& c) {
    ByteWriter body;
    body.put_string(format_meta(c.meta));
    body.put<std::uint32_t>(static_cast<std::uint32_t>(c.layout.blocks().size()));
    for (const auto& b : c.layout.blocks()) {
        body.put_string(b.name);
        body.put<std::uint64_t>(b.rows);
        body.put<std::uint64_t>(b.cols);
    }
    body.put_array(c.mean);
    if (c.kind == CheckpointKind::posterior) {
        body.put_array(c.fisher);
        body.put<double>(c.prior_variance);
    }

    ByteWriter file;
    for (char ch : std::string_view{"UPLMCKPT"}) file.put<char>(ch);
    file.put<std::uint32_t>(kCheckpointVersion);
    file.put<std::uint32_t>(static_cast<std::uint32_t>(c.kind));
    file.put<std::uint64_t>(body.bytes().size());
    auto& bytes = file.bytes();
    bytes.insert(bytes.end(), body.bytes().begin(), body.bytes().end());
    file.put<std::uint32_t>(crc32_of(bytes));

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out{path, std::ios::binary | std::ios::trunc};
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint " + path.string());
}

inline RawCheckpoint read_checkpoint(const std::filesystem::path& path, CheckpointKind expected) {
    std::ifstream in{path, std::ios::binary};
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::vector<char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    const std::string origin = path.string();
    constexpr std::size_t header = 8 + 4 + 4 + 8;
    if (bytes.size() < header || std::string_view(bytes.data(), 8) != "UPLMCKPT") {
        throw DataError(origin + ": not a checkpoint file");
    }
    ByteReader head{std::span<const char>{bytes}.subspan(8, header - 8), origin};
    const auto version = head.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw DataError(origin + ": checkpoint version " + std::to_string(version) + ", this build reads version " +
                        std::to_string(kCheckpointVersion));
    }
    const auto kind = static_cast<CheckpointKind>(head.get<std::uint32_t>());
    const auto body_len = head.get<std::uint64_t>();
    if (bytes.size() < header + 4 || body_len != bytes.size() - header - 4) {
        throw DataError(origin + ": truncated checkpoint (header announces " + std::to_string(body_len) +
                        " body bytes, file holds " + std::to_string(bytes.size() < header + 4 ? 0 : bytes.size() - header - 4) + ")");
    }
    std::uint32_t stored = 0;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    if (crc32_of(std::span<const char>{bytes}.first(bytes.size() - 4)) != stored) {
        throw DataError(origin + ": checksum mismatch, file is corrupted");
    }
    if (kind != expected) {
        throw DataError(origin + ": expected a " + std::string{expected == CheckpointKind::model ? "model" : "posterior"} +
                        " checkpoint");
    }

    ByteReader body{std::span<const char>{bytes}.subspan(header, body_len), origin};
    RawCheckpoint c;
    c.kind = kind;
    c.meta = KeyValueConfig::parse(body.get_string(), origin);
    const auto nblocks = body.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < nblocks; ++i) {
        auto name = body.get_string();
        const auto rows = body.get<std::uint64_t>();
        const auto cols = body.get<std::uint64_t>();
        c.layout.add(std::move(name), rows, cols);
    }
    c.mean = body.get_array();
    if (c.mean.size() != c.layout.total_size()) body.fail("parameter count does not match the block table");
    if (kind == CheckpointKind::posterior) {
        c.fisher = body.get_array();
        c.prior_variance = body.get<double>();
        if (c.fisher.size() != c.mean.size()) body.fail("Fisher length does not match the mean");
    }
    if (!body.done()) body.fail("trailing bytes after checkpoint body");
    return c;
}

inline std::string describe_block(const BlockInfo& b) {
    return "'" + b.name + "' " + std::to_string(b.rows) + "x" + std::to_string(b.cols);
}

}  // namespace detail

/// Throws DataError naming the first block that differs.
inline void check_layout(const ParameterLayout& expected, const ParameterLayout& found, std::string_view origin) {
    const auto& e = expected.blocks();
    const auto& f = found.blocks();
    for (std::size_t i = 0; i < std::max(e.size(), f.size()); ++i) {
        if (i >= e.size()) throw DataError(std::string{origin} + ": layout mismatch, unexpected block " + detail::describe_block(f[i]));
        if (i >= f.size()) throw DataError(std::string{origin} + ": layout mismatch, missing block " + detail::describe_block(e[i]));
        if (e[i].name != f[i].name || e[i].rows != f[i].rows || e[i].cols != f[i].cols) {
            throw DataError(std::string{origin} + ": layout mismatch, checkpoint has " + detail::describe_block(f[i]) +
                            " where " + detail::describe_block(e[i]) + " is expected");
        }
    }
}

struct ModelCheckpoint {
    ModelParameters params;
    KeyValueConfig meta;
};

/// `meta` holds free-form provenance (vocabulary, languages); the architecture
/// keys are added automatically.
inline void save_model(const std::filesystem::path& path, const ModelParameters& params, KeyValueConfig meta = {}) {
    meta.merge(params.arch.to_config());
    detail::RawCheckpoint c;
    c.kind = CheckpointKind::model;
    c.meta = std::move(meta);
    c.layout = params.layout;
    c.mean.assign(params.flat.values().begin(), params.flat.values().end());
    detail::write_checkpoint(path, c);
}

inline ModelCheckpoint load_model(const std::filesystem::path& path, const std::optional<ArchConfig>& expected = std::nullopt) {
    auto c = detail::read_checkpoint(path, CheckpointKind::model);
    const auto arch = ArchConfig::from_config(c.meta);
    if (expected) check_layout(model_layout(*expected), c.layout, path.string());
    ModelCheckpoint out{ModelParameters{arch}, std::move(c.meta)};
    check_layout(out.params.layout, c.layout, path.string());
    std::copy(c.mean.begin(), c.mean.end(), out.params.flat.data());
    return out;
}

inline void save_posterior(const std::filesystem::path& path, const LaplacePosterior& post) {
    detail::RawCheckpoint c;
    c.kind = CheckpointKind::posterior;
    c.meta = post.meta;
    c.layout = post.layout;
    c.mean.assign(post.mean.values().begin(), post.mean.values().end());
    c.fisher.assign(post.fisher.values().begin(), post.fisher.values().end());
    c.prior_variance = post.prior_variance;
    detail::write_checkpoint(path, c);
}

inline LaplacePosterior load_posterior(const std::filesystem::path& path, const std::optional<ArchConfig>& expected = std::nullopt) {
    auto c = detail::read_checkpoint(path, CheckpointKind::posterior);
    if (expected) check_layout(model_layout(*expected), c.layout, path.string());
    const std::size_t n = c.mean.size();
    auto post = assemble_posterior(Tensor{{std::max<std::size_t>(n, 1)}, std::move(c.mean)},
                                   Tensor{{std::max<std::size_t>(n, 1)}, std::move(c.fisher)}, c.prior_variance,
                                   std::move(c.layout));
    post.meta = std::move(c.meta);
    return post;
}

}  // namespace uplm
