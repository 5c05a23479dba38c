#include "stalab/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_map>

#include <json.hpp>

#include "stalab/error.hpp"
#include "stalab/rng.hpp"

namespace stalab {

namespace {

constexpr std::array kOnsets{"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t",
                             "v", "z", "br", "dr", "kl", "st", "th", "tr"};
constexpr std::array kVowels{"a", "e", "i", "o", "u", "ai", "ea", "io", "ou"};
constexpr std::array kCodas{"", "", "", "n", "r", "l", "s", "m", "th", "x"};

constexpr std::array kProfessions{"poet", "potter", "sculptor", "novelist", "weaver",
                                  "painter", "chemist", "cartographer", "violinist",
                                  "architect", "botanist", "playwright"};
constexpr std::array kCities{"Ilsan", "Morvale", "Quenta", "Dovra", "Pellis", "Arden",
                             "Koruna", "Vessel", "Tamber", "Ostrel", "Brisk", "Lune"};
constexpr std::array kAdjectives{"Silent", "Glass", "Hollow", "Golden", "Broken",
                                 "Northern", "Quiet", "Burning", "Pale", "Last"};
constexpr std::array kNouns{"River", "Garden", "Lantern", "Harbor", "Orchard", "Tower",
                            "Mirror", "Winter", "Bridge", "Forest"};
constexpr std::array kAwards{"Vellum", "Aster", "Corvin", "Halden", "Mira", "Sable"};

constexpr std::array kFillerFrames{
    "{n} visited {c} with a {p}.",
    "In {y}, {n} sold a {a} {o} in {c}.",
    "The {a} {o} of {c} was drawn by {n}.",
    "{n} met a {p} near the {o}. Later {n} left {c}.",
    "Every spring {n} walks from {c} to the {a} {o}.",
    "A {p} named {n} lived in {c} until {y}.",
    "The {o} is {a2} and the {p} is tired.",
    "{n} said the {o} in {c} is {a2}.",
};
// Frames that carry an arbitrary character string {r}.
constexpr std::array kCodeFrames{
    "The code for the {o} in {c} is {r}.",
    "{n} wrote {r} on the {o}.",
    "Ticket {r} was issued in {c}.",
    "{r}",
};
constexpr std::array kPlainAdjectives{"quiet", "green", "cold", "old", "bright", "small",
                                      "wide", "dark"};

template <std::size_t N>
const char* pick(Rng& rng, const std::array<const char*, N>& pool) {
    return pool[rng.uniform_int(N)];
}

std::string gen_word(Rng& rng, int syllables) {
    std::string w;
    for (int i = 0; i < syllables; ++i) {
        w += pick(rng, kOnsets);
        w += pick(rng, kVowels);
        if (i + 1 == syllables) w += pick(rng, kCodas);
    }
    w[0] = static_cast<char>(w[0] - 'a' + 'A');
    return w;
}

std::string gen_name(Rng& rng) {
    return gen_word(rng, 2) + " " + gen_word(rng, 2 + static_cast<int>(rng.uniform_int(2)));
}

std::string replace_all(std::string s, std::string_view key, std::string_view value) {
    for (std::size_t pos = s.find(key); pos != std::string::npos;
         pos = s.find(key, pos + value.size())) {
        s.replace(pos, key.size(), value);
    }
    return s;
}

std::string year(Rng& rng) { return std::to_string(1850 + rng.uniform_int(160)); }

std::pair<std::string, std::string> gen_fact(Rng& rng, const std::string& name) {
    switch (rng.uniform_int(6)) {
    case 0:
        return {"Who is " + name + "? ",
                name + " is a " + pick(rng, kProfessions) + " from " + pick(rng, kCities) + "."};
    case 1:
        return {"Where was " + name + " born? ",
                name + " was born in " + pick(rng, kCities) + "."};
    case 2:
        return {"What did " + name + " write? ",
                name + " wrote The " + pick(rng, kAdjectives) + " " + pick(rng, kNouns) + "."};
    case 3:
        return {"When was " + name + " born? ", name + " was born in " + year(rng) + "."};
    case 4:
        return {"What does " + name + " do? ", name + " works as a " + pick(rng, kProfessions) + "."};
    default:
        return {"Which prize did " + name + " win? ",
                name + " won the " + pick(rng, kAwards) + " Prize."};
    }
}

void check_encodable(std::string_view text) { (void)encode(text); }

} // namespace

Vocabulary::Vocabulary() {
    m_symbols.reserve(kSize);
    for (int c = kFirstPrintable; c <= kLastPrintable; ++c) m_symbols.emplace_back(1, static_cast<char>(c));
    m_symbols.emplace_back("<bos>");
    m_symbols.emplace_back("<eos>");
    m_symbols.emplace_back("<pad>");
}

Vocabulary build_vocab() { return Vocabulary(); }

TokenId Vocabulary::id(char c) const {
    const int code = static_cast<unsigned char>(c);
    if (code < kFirstPrintable || code > kLastPrintable) throw UnencodableCharacter(0);
    return code - kFirstPrintable;
}

TokenSeq Vocabulary::encode(std::string_view text) const {
    TokenSeq out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        const int code = static_cast<unsigned char>(text[i]);
        if (code < kFirstPrintable || code > kLastPrintable) throw UnencodableCharacter(i);
        out.push_back(code - kFirstPrintable);
    }
    return out;
}

std::string Vocabulary::decode(std::span<const TokenId> tokens) const {
    std::string out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) {
        if (t < 0 || t >= kSize) throw InvalidArgument("token id out of range: " + std::to_string(t));
        out += m_symbols[static_cast<std::size_t>(t)];
    }
    return out;
}

namespace {
const Vocabulary& global_vocab() {
    static const Vocabulary vocab = build_vocab();
    return vocab;
}
} // namespace

TokenSeq encode(std::string_view text) { return global_vocab().encode(text); }
std::string decode(std::span<const TokenId> tokens) { return global_vocab().decode(tokens); }

std::string to_string(Split split) {
    switch (split) {
    case Split::forget: return "forget";
    case Split::retain: return "retain";
    case Split::holdout: return "holdout";
    }
    return "?";
}

Split split_from_string(std::string_view name) {
    if (name == "forget") return Split::forget;
    if (name == "retain") return Split::retain;
    if (name == "holdout") return Split::holdout;
    throw InvalidArgument("unknown split: " + std::string(name));
}

std::vector<std::string> FactCorpus::ids(Split split) const {
    std::vector<std::string> out;
    for (const auto& r : records)
        if (r.split == split) out.push_back(r.id);
    return out;
}

std::vector<std::string> FactCorpus::trained_ids() const {
    std::vector<std::string> out;
    for (const auto& r : records)
        if (r.split != Split::holdout) out.push_back(r.id);
    return out;
}

std::vector<FactRecord> FactCorpus::select(Split split) const {
    std::vector<FactRecord> out;
    std::copy_if(records.begin(), records.end(), std::back_inserter(out),
                 [split](const FactRecord& r) { return r.split == split; });
    return out;
}

const FactRecord& FactCorpus::find(std::string_view id) const {
    for (const auto& r : records)
        if (r.id == id) return r;
    throw UnknownRecord("no record with id " + std::string(id));
}

std::vector<int> largest_remainder(int total, std::span<const double> weights) {
    const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<int> parts(weights.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    int assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double quota = total * weights[i] / sum;
        parts[i] = static_cast<int>(std::floor(quota));
        assigned += parts[i];
        remainders.emplace_back(quota - parts[i], i);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (int i = 0; i < total - assigned; ++i) ++parts[remainders[static_cast<std::size_t>(i)].second];
    return parts;
}

FactCorpus gen_fact_corpus(const CorpusParams& params) {
    if (!(params.forget_fraction > 0.0 && params.forget_fraction < 1.0))
        throw InvalidFraction("forget_fraction must lie in (0, 1), got " +
                              std::to_string(params.forget_fraction));
    if (params.n_facts < 10) throw InvalidArgument("n_facts must be >= 10");
    if (params.n_holdout < 0) throw InvalidArgument("n_holdout must be >= 0");
    if (params.min_completion < 1 || params.max_completion < params.min_completion)
        throw InvalidArgument("invalid completion length range");

    const std::array<double, 2> weights{params.forget_fraction, 1.0 - params.forget_fraction};
    const auto sizes = largest_remainder(params.n_facts, weights);
    const int total = params.n_facts + params.n_holdout;

    Rng rng(derive_seed(params.seed, 1));
    std::set<std::string> names;
    std::set<std::string> completions;
    FactCorpus corpus;
    corpus.seed = params.seed;
    int attempts = 0;
    while (static_cast<int>(corpus.records.size()) < total) {
        if (++attempts > 1000 * total) throw InvalidArgument("cannot satisfy completion length range");
        std::string name = gen_name(rng);
        if (names.contains(name)) continue;
        auto [prompt, completion] = gen_fact(rng, name);
        const int len = static_cast<int>(completion.size());
        if (len < params.min_completion || len > params.max_completion) continue;
        if (completions.contains(completion)) continue;
        names.insert(name);
        completions.insert(completion);
        FactRecord rec;
        char buf[32];
        std::snprintf(buf, sizeof buf, "fact-%04zu", corpus.records.size());
        rec.id = buf;
        rec.prompt = std::move(prompt);
        rec.completion = std::move(completion);
        corpus.records.push_back(std::move(rec));
    }

    // Split assignment over a seeded permutation of positions.
    std::vector<std::size_t> order(corpus.records.size());
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng(derive_seed(params.seed, 2));
    split_rng.shuffle(order);
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto& rec = corpus.records[order[i]];
        if (i < static_cast<std::size_t>(sizes[0])) rec.split = Split::forget;
        else if (i < static_cast<std::size_t>(params.n_facts)) rec.split = Split::retain;
        else rec.split = Split::holdout;
    }
    return corpus;
}

FactCorpus gen_fact_corpus(std::uint64_t seed, int n_facts, double forget_fraction) {
    CorpusParams p;
    p.seed = seed;
    p.n_facts = n_facts;
    p.forget_fraction = forget_fraction;
    p.n_holdout = 0;
    return gen_fact_corpus(p);
}

RandomString gen_random_string(std::uint64_t seed, int length) {
    if (length < 1) throw InvalidArgument("random string length must be >= 1");
    Rng rng(derive_seed(seed, 0x5EED));
    RandomString rs{seed, length, {}};
    rs.text.reserve(static_cast<std::size_t>(length));
    for (int i = 0; i < length; ++i) rs.text.push_back(static_cast<char>(33 + rng.uniform_int(94)));
    return rs;
}

std::vector<std::string> gen_filler_text(std::uint64_t seed, int n_docs, const FactCorpus& exclude) {
    std::set<std::string> banned;
    for (const auto& r : exclude.records) {
        // Every fact completion opens with the two-word name.
        const auto first = r.completion.find(' ');
        const auto second = r.completion.find(' ', first + 1);
        banned.insert(r.completion.substr(0, second));
    }
    Rng rng(derive_seed(seed, 3));
    std::vector<std::string> docs;
    docs.reserve(static_cast<std::size_t>(n_docs));
    while (static_cast<int>(docs.size()) < n_docs) {
        std::string name = gen_name(rng);
        if (banned.contains(name)) continue;
        if (rng.uniform_int(2) == 0) {
            // Biography-style question and answer about a non-corpus person.
            auto [prompt, completion] = gen_fact(rng, name);
            docs.push_back(prompt + completion);
            continue;
        }
        const bool code = rng.uniform_int(2) == 0;
        std::string doc = code ? pick(rng, kCodeFrames) : pick(rng, kFillerFrames);
        doc = replace_all(doc, "{n}", name);
        doc = replace_all(doc, "{c}", pick(rng, kCities));
        doc = replace_all(doc, "{p}", pick(rng, kProfessions));
        doc = replace_all(doc, "{y}", year(rng));
        doc = replace_all(doc, "{a}", pick(rng, kAdjectives));
        doc = replace_all(doc, "{a2}", pick(rng, kPlainAdjectives));
        doc = replace_all(doc, "{o}", pick(rng, kNouns));
        if (code) {
            std::string r;
            const int len = 4 + static_cast<int>(rng.uniform_int(29));
            for (int i = 0; i < len; ++i) r += static_cast<char>(33 + rng.uniform_int(94));
            doc = replace_all(doc, "{r}", r);
        }
        docs.push_back(std::move(doc));
    }
    return docs;
}

namespace {

std::ofstream open_for_write(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

} // namespace

void write_corpus(const FactCorpus& corpus, const std::filesystem::path& path) {
    auto out = open_for_write(path);
    for (const auto& r : corpus.records) {
        nlohmann::ordered_json j;
        j["id"] = r.id;
        j["prompt"] = r.prompt;
        j["completion"] = r.completion;
        j["split"] = to_string(r.split);
        j["seed"] = corpus.seed;
        out << j.dump() << '\n';
    }
}

FactCorpus read_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("cannot read corpus " + path.string());
    FactCorpus corpus;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        FactRecord r;
        r.id = j.at("id").get<std::string>();
        r.prompt = j.at("prompt").get<std::string>();
        r.completion = j.at("completion").get<std::string>();
        r.split = split_from_string(j.at("split").get<std::string>());
        if (r.prompt.empty() || r.completion.empty())
            throw CorruptArtifact("empty prompt or completion in record " + r.id);
        check_encodable(r.prompt);
        check_encodable(r.completion);
        corpus.seed = j.value("seed", std::uint64_t{0});
        corpus.records.push_back(std::move(r));
    }
    return corpus;
}

void write_split_manifest(const FactCorpus& corpus, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["seed"] = corpus.seed;
    j["forget"] = corpus.ids(Split::forget);
    j["retain"] = corpus.ids(Split::retain);
    j["holdout"] = corpus.ids(Split::holdout);
    j["trained"] = corpus.trained_ids();
    auto out = open_for_write(path);
    out << j.dump(2) << '\n';
}

void write_lines(const std::vector<std::string>& docs, const std::filesystem::path& path) {
    auto out = open_for_write(path);
    for (const auto& d : docs) out << d << '\n';
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("cannot read " + path.string());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(line);
    return out;
}

} // namespace stalab
