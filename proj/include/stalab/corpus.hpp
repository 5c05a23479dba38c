#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stalab {

using TokenId = int;
using TokenSeq = std::vector<TokenId>;

/// Character-level vocabulary: printable ASCII 32..126 in code order, then
/// the BOS, EOS and PAD specials.
class Vocabulary {
public:
    static constexpr int kFirstPrintable = 32;
    static constexpr int kLastPrintable = 126;
    static constexpr int kPrintableCount = kLastPrintable - kFirstPrintable + 1;
    static constexpr TokenId kBos = kPrintableCount;
    static constexpr TokenId kEos = kPrintableCount + 1;
    static constexpr TokenId kPad = kPrintableCount + 2;
    static constexpr int kSize = kPrintableCount + 3;

    int size() const noexcept { return kSize; }
    const std::vector<std::string>& symbols() const noexcept { return m_symbols; }

    static bool is_printable(TokenId id) noexcept { return id >= 0 && id < kPrintableCount; }
    static bool is_special(TokenId id) noexcept { return id >= kPrintableCount && id < kSize; }

    /// Id of a single printable character; throws UnencodableCharacter(0).
    TokenId id(char c) const;

    TokenSeq encode(std::string_view text) const;
    /// Specials are rendered as <bos>, <eos>, <pad>.
    std::string decode(std::span<const TokenId> tokens) const;

private:
    friend Vocabulary build_vocab();
    Vocabulary();
    std::vector<std::string> m_symbols;
};

Vocabulary build_vocab();

/// Convenience wrappers over a process-wide vocabulary.
TokenSeq encode(std::string_view text);
std::string decode(std::span<const TokenId> tokens);

enum class Split { forget, retain, holdout };

std::string to_string(Split split);
Split split_from_string(std::string_view name);

struct FactRecord {
    std::string id;
    std::string prompt;
    std::string completion;
    Split split = Split::retain;

    bool operator==(const FactRecord&) const = default;
};

struct CorpusParams {
    std::uint64_t seed = 7;
    int n_facts = 100;            ///< trained facts (forget + retain)
    double forget_fraction = 0.10;
    int n_holdout = 20;           ///< never-trained facts, disjoint from the above
    int min_completion = 16;
    int max_completion = 48;
};

struct FactCorpus {
    std::vector<FactRecord> records;
    std::uint64_t seed = 0;

    std::vector<std::string> ids(Split split) const;
    /// forget ∪ retain.
    std::vector<std::string> trained_ids() const;
    std::vector<FactRecord> select(Split split) const;
    const FactRecord& find(std::string_view id) const;

    bool operator==(const FactCorpus&) const = default;
};

/// Splits `total` into parts proportional to `weights` with largest-remainder
/// rounding; ties go to the earlier part.
std::vector<int> largest_remainder(int total, std::span<const double> weights);

FactCorpus gen_fact_corpus(const CorpusParams& params);
FactCorpus gen_fact_corpus(std::uint64_t seed, int n_facts, double forget_fraction);

struct RandomString {
    std::uint64_t seed = 0;
    int length = 0;
    std::string text;
};

/// i.i.d. uniform characters from ASCII 33..126.
RandomString gen_random_string(std::uint64_t seed, int length);

/// Filler documents for base-model pretraining: narrative sentences, lines
/// carrying arbitrary character codes, and biography-style question/answer
/// pairs about people whose names never occur in `exclude`, so no fact
/// completion occurs in the filler.
std::vector<std::string> gen_filler_text(std::uint64_t seed, int n_docs,
                                         const FactCorpus& exclude);

// Line-delimited JSON records {id, prompt, completion, split}.
void write_corpus(const FactCorpus& corpus, const std::filesystem::path& path);
FactCorpus read_corpus(const std::filesystem::path& path);
/// Split manifest: record ids per split plus the trained union.
void write_split_manifest(const FactCorpus& corpus, const std::filesystem::path& path);
void write_lines(const std::vector<std::string>& docs, const std::filesystem::path& path);
/// Blank lines are skipped.
std::vector<std::string> read_lines(const std::filesystem::path& path);

} // namespace stalab
