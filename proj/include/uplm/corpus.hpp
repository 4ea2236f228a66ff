#pragma once

// Per-language text ingestion, the shared character vocabulary, train/dev/test
// splits, few-shot samples and the language-proportional batch stream.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "uplm/errors.hpp"
#include "uplm/rng.hpp"

namespace uplm {

using Sentence = std::vector<std::int32_t>;

// ---------------------------------------------------------------------------
// UTF-8

/// Decodes UTF-8, rejecting overlong forms, surrogates and truncated sequences.
/// Throws DataError carrying the byte offset of the first bad sequence.
inline std::u32string decode_utf8(std::string_view bytes, std::size_t base_offset = 0) {
    std::u32string out;
    out.reserve(bytes.size());
    std::size_t i = 0;
    auto fail = [&](std::size_t at) {
        throw DataError("invalid UTF-8 at byte offset " + std::to_string(base_offset + at));
    };
    while (i < bytes.size()) {
        const auto b0 = static_cast<unsigned char>(bytes[i]);
        if (b0 < 0x80) {
            out.push_back(b0);
            ++i;
            continue;
        }
        std::size_t len = 0;
        char32_t cp = 0;
        char32_t min = 0;
        if ((b0 & 0xE0) == 0xC0) {
            len = 2, cp = b0 & 0x1F, min = 0x80;
        } else if ((b0 & 0xF0) == 0xE0) {
            len = 3, cp = b0 & 0x0F, min = 0x800;
        } else if ((b0 & 0xF8) == 0xF0) {
            len = 4, cp = b0 & 0x07, min = 0x10000;
        } else {
            fail(i);
        }
        if (i + len > bytes.size()) fail(i);
        for (std::size_t k = 1; k < len; ++k) {
            const auto b = static_cast<unsigned char>(bytes[i + k]);
            if ((b & 0xC0) != 0x80) fail(i);
            cp = (cp << 6) | (b & 0x3F);
        }
        if (cp < min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) fail(i);
        out.push_back(cp);
        i += len;
    }
    return out;
}

inline std::string encode_utf8(std::u32string_view text) {
    std::string out;
    for (char32_t cp : text) {
        if (cp < 0x80) {
            out.push_back(static_cast<char>(cp));
        } else if (cp < 0x800) {
            out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else if (cp < 0x10000) {
            out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else {
            out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Raw text

struct RawDataset {
    std::string language_id;
    std::vector<std::u32string> sentences;
};

/// One sentence per line. Empty lines are dropped; a trailing '\r' is removed
/// so CRLF files load like LF files. Everything else is kept verbatim.
inline RawDataset parse_corpus_text(std::string_view bytes, std::string language_id) {
    RawDataset raw{std::move(language_id), {}};
    std::size_t start = 0;
    while (start <= bytes.size()) {
        auto end = bytes.find('\n', start);
        if (end == std::string_view::npos) end = bytes.size();
        auto line = bytes.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (!line.empty()) raw.sentences.push_back(decode_utf8(line, start));
        if (end == bytes.size()) break;
        start = end + 1;
    }
    if (raw.sentences.empty()) throw DataError("corpus for '" + raw.language_id + "' has no sentences");
    return raw;
}

inline RawDataset load_corpus(const std::filesystem::path& path, std::string language_id) {
    std::ifstream in{path, std::ios::binary};
    if (!in) throw DataError("cannot open corpus file " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    const auto bytes = os.str();
    if (bytes.empty()) throw DataError("corpus file is empty: " + path.string());
    try {
        return parse_corpus_text(bytes, std::move(language_id));
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

/// Languages available in a `corpus/<lang_id>.txt` directory, sorted by id.
inline std::vector<std::string> list_corpus_languages(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw DataError("corpus directory not found: " + dir.string());
    std::vector<std::string> ids;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".txt") {
            ids.push_back(entry.path().stem().string());
        }
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

// ---------------------------------------------------------------------------
// Vocabulary

class CharVocabulary {
public:
    static constexpr std::int32_t bos = 0;
    static constexpr std::int32_t eos = 1;
    static constexpr std::int32_t special_count = 2;

    CharVocabulary() = default;

    /// Symbols are deduplicated and ordered by code point.
    explicit CharVocabulary(std::vector<char32_t> symbols) : symbols_{std::move(symbols)} {
        std::sort(symbols_.begin(), symbols_.end());
        symbols_.erase(std::unique(symbols_.begin(), symbols_.end()), symbols_.end());
        for (std::size_t i = 0; i < symbols_.size(); ++i) {
            index_[symbols_[i]] = static_cast<std::int32_t>(i) + special_count;
        }
    }

    [[nodiscard]] std::size_t size() const noexcept { return symbols_.size() + special_count; }
    [[nodiscard]] const std::vector<char32_t>& symbols() const noexcept { return symbols_; }

    [[nodiscard]] std::optional<std::int32_t> index_of(char32_t c) const {
        const auto it = index_.find(c);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    [[nodiscard]] char32_t symbol_at(std::int32_t index) const {
        if (index < special_count || static_cast<std::size_t>(index) >= size()) {
            throw std::out_of_range("CharVocabulary: not a character index");
        }
        return symbols_[static_cast<std::size_t>(index - special_count)];
    }

    [[nodiscard]] static bool is_special(std::int32_t index) noexcept { return index < special_count; }

    /// BOS + characters + EOS. Throws DataError on an out-of-vocabulary character.
    [[nodiscard]] Sentence encode(std::u32string_view text) const {
        Sentence out;
        out.reserve(text.size() + 2);
        out.push_back(bos);
        for (char32_t c : text) {
            const auto idx = index_of(c);
            if (!idx) throw DataError("character U+" + to_hex(c) + " is not in the vocabulary");
            out.push_back(*idx);
        }
        out.push_back(eos);
        return out;
    }

    /// Drops BOS/EOS and maps the remaining indices back to characters.
    [[nodiscard]] std::u32string decode(std::span<const std::int32_t> indices) const {
        std::u32string out;
        for (auto i : indices) {
            if (!is_special(i)) out.push_back(symbol_at(i));
        }
        return out;
    }

    bool operator==(const CharVocabulary& o) const { return symbols_ == o.symbols_; }

private:
    static std::string to_hex(char32_t c) {
        std::ostringstream os;
        os << std::hex << std::uppercase << static_cast<std::uint32_t>(c);
        return os.str();
    }

    std::vector<char32_t> symbols_;
    std::map<char32_t, std::int32_t> index_;
};

/// Union of every character in every dataset (training and held-out alike).
inline CharVocabulary build_vocabulary(std::span<const RawDataset> datasets) {
    std::set<char32_t> chars;
    for (const auto& d : datasets) {
        for (const auto& s : d.sentences) chars.insert(s.begin(), s.end());
    }
    return CharVocabulary{std::vector<char32_t>(chars.begin(), chars.end())};
}

// ---------------------------------------------------------------------------
// Splits

struct LanguageDataset {
    std::string language_id;
    std::vector<Sentence> train;
    std::vector<Sentence> dev;
    std::vector<Sentence> test;

    [[nodiscard]] std::size_t total_sentences() const { return train.size() + dev.size() + test.size(); }
};

struct SplitRatios {
    double train{0.8};
    double dev{0.1};
    double test{0.1};
};

struct SplitCounts {
    std::size_t train{0}, dev{0}, test{0};
};

/// dev = max(1, floor(dev_ratio * n)), test likewise; train takes the remainder.
inline SplitCounts split_counts(std::size_t n, const SplitRatios& ratios = {}) {
    if (std::abs(ratios.train + ratios.dev + ratios.test - 1.0) > 1e-9) {
        throw ConfigError("split ratios must sum to 1");
    }
    if (n < 3) throw DataError("need at least 3 sentences to split, got " + std::to_string(n));
    SplitCounts c;
    c.dev = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(ratios.dev * static_cast<double>(n))));
    c.test = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(ratios.test * static_cast<double>(n))));
    if (c.dev + c.test >= n) throw DataError("split leaves no training sentences");
    c.train = n - c.dev - c.test;
    return c;
}

/// Seeded shuffle followed by a contiguous train | dev | test partition.
inline LanguageDataset split_dataset(const RawDataset& raw, const CharVocabulary& vocab,
                                     std::uint64_t seed, const SplitRatios& ratios = {}) {
    const auto counts = split_counts(raw.sentences.size(), ratios);
    std::vector<std::size_t> order(raw.sentences.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = Rng::stream(seed, "split").split(raw.language_id);
    rng.shuffle(std::span{order});

    LanguageDataset ds;
    ds.language_id = raw.language_id;
    for (std::size_t k = 0; k < order.size(); ++k) {
        auto encoded = vocab.encode(raw.sentences[order[k]]);
        if (k < counts.train) {
            ds.train.push_back(std::move(encoded));
        } else if (k < counts.train + counts.dev) {
            ds.dev.push_back(std::move(encoded));
        } else {
            ds.test.push_back(std::move(encoded));
        }
    }
    return ds;
}

/// min(n, |train|) distinct training sentences drawn uniformly without replacement.
inline std::vector<Sentence> sample_fewshot(const LanguageDataset& ds, std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(ds.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = Rng::stream(seed, "fewshot").split(ds.language_id);
    const std::size_t k = std::min(n, order.size());
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < k; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(order.size() - i));
        std::swap(order[i], order[j]);
    }
    std::vector<Sentence> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back(ds.train[order[i]]);
    return out;
}

/// Counts of every non-special symbol across all three splits.
inline std::vector<double> unigram_distribution(const LanguageDataset& ds, const CharVocabulary& vocab) {
    std::vector<double> counts(vocab.size(), 0.0);
    for (const auto* split : {&ds.train, &ds.dev, &ds.test}) {
        for (const auto& s : *split) {
            for (auto i : s) {
                if (!CharVocabulary::is_special(i)) counts[static_cast<std::size_t>(i)] += 1.0;
            }
        }
    }
    return counts;
}

// ---------------------------------------------------------------------------
// Segments and batches

/// A time-major block of `steps` x `batch` predictions. Column b at step t
/// reads inputs[t*batch+b] and predicts targets[t*batch+b]; mask 0 marks padding,
/// during which the recurrent state of that column is held fixed.
struct Segment {
    std::size_t steps{0};
    std::size_t batch{0};
    std::vector<std::int32_t> inputs;
    std::vector<std::int32_t> targets;
    std::vector<std::uint8_t> mask;
    /// True when this segment continues the sequences of the previous one.
    bool continues{false};

    [[nodiscard]] std::size_t predicted() const {
        return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
    }
};

/// Chops `rows` into segments of at most `max_len` predictions each. Rows are
/// right-padded with EOS.
inline std::vector<Segment> make_segments(std::span<const Sentence> rows, std::size_t max_len) {
    std::vector<Segment> out;
    if (rows.empty()) return out;
    std::size_t width = 0;
    for (const auto& r : rows) width = std::max(width, r.size());
    if (width < 2) return out;
    const std::size_t total_steps = width - 1;
    max_len = std::max<std::size_t>(1, max_len);
    const std::size_t B = rows.size();
    for (std::size_t begin = 0; begin < total_steps; begin += max_len) {
        Segment seg;
        seg.steps = std::min(max_len, total_steps - begin);
        seg.batch = B;
        seg.continues = begin > 0;
        seg.inputs.assign(seg.steps * B, CharVocabulary::eos);
        seg.targets.assign(seg.steps * B, CharVocabulary::eos);
        seg.mask.assign(seg.steps * B, 0);
        for (std::size_t t = 0; t < seg.steps; ++t) {
            const std::size_t pos = begin + t;
            for (std::size_t b = 0; b < B; ++b) {
                const auto& r = rows[b];
                if (pos + 1 < r.size()) {
                    seg.inputs[t * B + b] = r[pos];
                    seg.targets[t * B + b] = r[pos + 1];
                    seg.mask[t * B + b] = 1;
                }
            }
        }
        out.push_back(std::move(seg));
    }
    return out;
}

inline Segment make_single_segment(const Sentence& sentence) {
    const std::span<const Sentence> one{&sentence, 1};
    auto segs = make_segments(one, sentence.size());
    if (segs.empty()) throw DataError("sentence has no predicted positions");
    return std::move(segs.front());
}

struct BatchConfig {
    std::size_t batch_size{128};
    double length_mean{125.0};
    double length_std{5.0};
    std::uint64_t seed{0};

    void validate() const {
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(length_mean > 0.0)) throw ConfigError("length_mean must be > 0");
        if (length_std < 0.0) throw ConfigError("length_std must be >= 0");
    }
};

struct Batch {
    std::size_t language{0};
    std::string language_id;
    std::vector<Sentence> rows;
    /// Maximum number of predictions per segment, rounded draw from N(mean, std^2), >= 2.
    std::size_t max_len{0};
    double lr_scale{1.0};

    [[nodiscard]] std::vector<Segment> segments() const { return make_segments(rows, max_len); }
};

/// Draws language indices with probability proportional to `weights`.
class LanguageSampler {
public:
    explicit LanguageSampler(std::vector<double> weights) : weights_{std::move(weights)} {}

    std::size_t draw(Rng& rng, const std::vector<bool>* available = nullptr) const {
        double total = 0.0;
        for (std::size_t i = 0; i < weights_.size(); ++i) {
            if (!available || (*available)[i]) total += weights_[i];
        }
        if (!(total > 0.0)) throw std::logic_error("LanguageSampler: no language available");
        const double u = rng.uniform() * total;
        double acc = 0.0;
        std::size_t last = 0;
        for (std::size_t i = 0; i < weights_.size(); ++i) {
            if (available && !(*available)[i]) continue;
            acc += weights_[i];
            last = i;
            if (u < acc) return i;
        }
        return last;
    }

private:
    std::vector<double> weights_;
};

/// rounded(m)/mean * |D_T| / (|T| * |D_l|), sizes counted in sentences.
inline double batch_lr_scale(std::size_t max_len, double length_mean, std::size_t total_sentences,
                             std::size_t language_count, std::size_t language_sentences) {
    return (static_cast<double>(max_len) / length_mean) *
           (static_cast<double>(total_sentences) /
            (static_cast<double>(language_count) * static_cast<double>(language_sentences)));
}

/// Single-consumer stream of one epoch's batches. Languages are drawn with
/// p(l) proportional to their sentence count among languages with sentences
/// left; sentences are consumed without replacement; the epoch ends when every
/// sentence has been emitted once.
class BatchStream {
public:
    BatchStream(std::vector<std::string> language_ids, std::vector<const std::vector<Sentence>*> data,
                const BatchConfig& cfg, std::uint64_t epoch)
        : ids_{std::move(language_ids)}, data_{std::move(data)}, cfg_{cfg} {
        cfg_.validate();
        if (ids_.size() != data_.size() || data_.empty()) {
            throw std::invalid_argument("BatchStream: need one id per dataset");
        }
        rng_ = Rng::stream(cfg.seed, "batches").split(epoch);
        std::vector<double> weights;
        for (std::size_t l = 0; l < data_.size(); ++l) {
            if (data_[l]->empty()) throw DataError("language '" + ids_[l] + "' has no training sentences");
            total_ += data_[l]->size();
            weights.push_back(static_cast<double>(data_[l]->size()));
            std::vector<std::size_t> order(data_[l]->size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            auto shuffle_rng = rng_.split("order").split(l);
            shuffle_rng.shuffle(std::span{order});
            order_.push_back(std::move(order));
            cursor_.push_back(0);
        }
        available_.assign(data_.size(), true);
        sampler_.emplace(std::move(weights));
    }

    std::optional<Batch> next() {
        if (std::none_of(available_.begin(), available_.end(), [](bool b) { return b; })) return std::nullopt;
        const std::size_t l = sampler_->draw(rng_, &available_);
        Batch batch;
        batch.language = l;
        batch.language_id = ids_[l];
        const auto& order = order_[l];
        auto& cur = cursor_[l];
        const std::size_t take = std::min(cfg_.batch_size, order.size() - cur);
        for (std::size_t k = 0; k < take; ++k) batch.rows.push_back((*data_[l])[order[cur + k]]);
        cur += take;
        if (cur == order.size()) available_[l] = false;
        const double draw = rng_.normal(cfg_.length_mean, cfg_.length_std);
        batch.max_len = static_cast<std::size_t>(std::max(2.0, std::round(draw)));
        batch.lr_scale = batch_lr_scale(batch.max_len, cfg_.length_mean, total_, data_.size(), data_[l]->size());
        return batch;
    }

    [[nodiscard]] std::size_t total_sentences() const noexcept { return total_; }

private:
    std::vector<std::string> ids_;
    std::vector<const std::vector<Sentence>*> data_;
    BatchConfig cfg_;
    Rng rng_;
    std::vector<std::vector<std::size_t>> order_;
    std::vector<std::size_t> cursor_;
    std::vector<bool> available_;
    std::optional<LanguageSampler> sampler_;
    std::size_t total_{0};
};

/// All batches of one epoch over the training splits of `datasets`.
inline std::vector<Batch> make_batches(std::span<const LanguageDataset> datasets, const BatchConfig& cfg,
                                       std::uint64_t epoch = 0) {
    std::vector<std::string> ids;
    std::vector<const std::vector<Sentence>*> data;
    for (const auto& d : datasets) {
        ids.push_back(d.language_id);
        data.push_back(&d.train);
    }
    BatchStream stream{std::move(ids), std::move(data), cfg, epoch};
    std::vector<Batch> out;
    while (auto b = stream.next()) out.push_back(std::move(*b));
    return out;
}

}  // namespace uplm
