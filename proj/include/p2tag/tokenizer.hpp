#pragma once

// Whitespace/frequency vocabulary, fixed-length encoding with [CLS]/[SEP]
// framing, and Bernoulli token masking for the MLM objective.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "p2tag/rng.hpp"

namespace p2tag {

using TokenId = std::int32_t;

// reserved ids are fixed regardless of corpus
constexpr TokenId kPadId = 0;
constexpr TokenId kUnkId = 1;
constexpr TokenId kClsId = 2;
constexpr TokenId kSepId = 3;
constexpr TokenId kMaskId = 4;
constexpr TokenId kNumReserved = 5;

inline const char* reserved_token_name(TokenId id) {
    switch (id) {
        case kPadId: return "[PAD]";
        case kUnkId: return "[UNK]";
        case kClsId: return "[CLS]";
        case kSepId: return "[SEP]";
        case kMaskId: return "[MASK]";
        default: return nullptr;
    }
}

// lowercased alpha-numeric runs; any other character separates tokens
inline std::vector<std::string> word_split(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (unsigned char ch : text) {
        if (std::isalnum(ch)) {
            cur += static_cast<char>(std::tolower(ch));
        } else if (!cur.empty()) {
            words.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

class Vocabulary {
public:
    Vocabulary() {
        for (TokenId t = 0; t < kNumReserved; ++t)
            add_internal(reserved_token_name(t));
    }

    TokenId lookup(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? kUnkId : it->second;
    }

    const std::string& token(TokenId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
            throw std::out_of_range("Vocabulary::token: id out of range");
        return id_to_token_[static_cast<std::size_t>(id)];
    }

    bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

    std::int64_t size() const { return static_cast<std::int64_t>(id_to_token_.size()); }

    void add(const std::string& token) {
        if (token_to_id_.count(token))
            throw std::invalid_argument("Vocabulary::add: duplicate token " + token);
        add_internal(token);
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("Vocabulary::save: cannot write " + path);
        for (std::size_t i = 0; i < id_to_token_.size(); ++i)
            f << id_to_token_[i] << '\t' << i << '\n';
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("Vocabulary::load: cannot open " + path);
        Vocabulary v;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            if (line.empty()) continue;
            std::size_t tab = line.find('\t');
            if (tab == std::string::npos)
                throw std::runtime_error("Vocabulary::load: missing tab at line " +
                                         std::to_string(line_no));
            std::string tok = line.substr(0, tab);
            std::int64_t id = std::stoll(line.substr(tab + 1));
            if (id < kNumReserved) {
                if (tok != reserved_token_name(static_cast<TokenId>(id)))
                    throw std::runtime_error("Vocabulary::load: reserved header corrupt at line " +
                                             std::to_string(line_no));
                continue;  // constructor already installed it
            }
            if (id != v.size())
                throw std::runtime_error("Vocabulary::load: non-contiguous id at line " +
                                         std::to_string(line_no));
            v.add_internal(tok);
        }
        return v;
    }

    std::uint64_t hash() const {
        // FNV-1a over the serialized table
        std::uint64_t h = 1469598103934665603ull;
        for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
            for (char c : id_to_token_[i]) {
                h ^= static_cast<unsigned char>(c);
                h *= 1099511628211ull;
            }
            h ^= i;
            h *= 1099511628211ull;
        }
        return h;
    }

private:
    void add_internal(const std::string& token) {
        token_to_id_[token] = static_cast<TokenId>(id_to_token_.size());
        id_to_token_.push_back(token);
    }

    std::unordered_map<std::string, TokenId> token_to_id_;
    std::vector<std::string> id_to_token_;
};

// most frequent tokens kept up to cap; frequency ties broken lexicographically
template <typename TextIter>
Vocabulary build_vocab(TextIter begin, TextIter end, std::int64_t cap) {
    if (cap <= kNumReserved)
        throw std::invalid_argument("build_vocab: cap must exceed the reserved-token count");
    std::map<std::string, std::int64_t> freq;
    bool saw_any = false;
    for (auto it = begin; it != end; ++it) {
        saw_any = true;
        for (auto& w : word_split(*it)) ++freq[w];
    }
    if (!saw_any) throw std::invalid_argument("build_vocab: empty corpus");

    std::vector<std::pair<std::string, std::int64_t>> items(freq.begin(), freq.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocabulary v;
    for (const auto& [tok, count] : items) {
        (void)count;
        if (v.size() >= cap) break;
        v.add(tok);
    }
    return v;
}

inline Vocabulary build_vocab(const std::vector<std::string>& corpus, std::int64_t cap) {
    return build_vocab(corpus.begin(), corpus.end(), cap);
}

// [CLS] + content truncated to max_len-2 + [SEP], padded to exactly max_len
inline std::vector<TokenId> encode(const Vocabulary& v, const std::string& text,
                                   std::int64_t max_len) {
    if (max_len < 3) throw std::invalid_argument("encode: max_len must be >= 3");
    std::vector<TokenId> ids;
    ids.reserve(static_cast<std::size_t>(max_len));
    ids.push_back(kClsId);
    for (const auto& w : word_split(text)) {
        if (ids.size() >= static_cast<std::size_t>(max_len) - 1) break;
        ids.push_back(v.lookup(w));
    }
    ids.push_back(kSepId);
    while (ids.size() < static_cast<std::size_t>(max_len)) ids.push_back(kPadId);
    return ids;
}

// space-joined content tokens, special tokens dropped
inline std::string decode(const Vocabulary& v, const std::vector<TokenId>& ids) {
    std::string out;
    for (TokenId id : ids) {
        if (id < kNumReserved) continue;
        if (!out.empty()) out += ' ';
        out += v.token(id);
    }
    return out;
}

struct MaskedSequence {
    std::vector<TokenId> original_ids;
    std::vector<TokenId> masked_ids;
    std::vector<std::int64_t> mask_positions;  // ascending
    double mask_rate = 0.0;
};

// each content token is independently replaced by [MASK] with probability p;
// [CLS], [SEP] and [PAD] are never touched
inline MaskedSequence mask_tokens(const std::vector<TokenId>& seq, double p, Rng& rng) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("mask_tokens: p must be in [0,1]");
    MaskedSequence m;
    m.original_ids = seq;
    m.masked_ids = seq;
    m.mask_rate = p;
    for (std::size_t t = 0; t < seq.size(); ++t) {
        TokenId id = seq[t];
        if (id == kClsId || id == kSepId || id == kPadId) continue;
        if (rng.bernoulli(p)) {
            m.masked_ids[t] = kMaskId;
            m.mask_positions.push_back(static_cast<std::int64_t>(t));
        }
    }
    return m;
}

}  // namespace p2tag
