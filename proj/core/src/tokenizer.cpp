#include "chatnmt/tokenizer.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "chatnmt/error.hpp"

namespace chatnmt {

const std::string Tokenizer::kSpaceMark = "\xE2\x96\x81";  // ▁

TokenizerMode tokenizer_mode_from_string(const std::string& s) {
    if (s == "word") return TokenizerMode::word;
    if (s == "char" || s == "character") return TokenizerMode::character;
    if (s == "bpe") return TokenizerMode::bpe;
    throw ConfigError("unknown tokenizer mode: " + s);
}

std::string to_string(TokenizerMode m) {
    switch (m) {
        case TokenizerMode::word: return "word";
        case TokenizerMode::character: return "char";
        case TokenizerMode::bpe: return "bpe";
    }
    return "?";
}

std::vector<std::string> utf8_chars(const std::string& text) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        const unsigned char b = static_cast<unsigned char>(text[i]);
        size_t len = 1;
        if ((b & 0x80) == 0x00) len = 1;
        else if ((b & 0xE0) == 0xC0) len = 2;
        else if ((b & 0xF0) == 0xE0) len = 3;
        else if ((b & 0xF8) == 0xF0) len = 4;
        if (i + len > text.size()) len = 1;  // malformed tail: take the byte as-is
        out.push_back(text.substr(i, len));
        i += len;
    }
    return out;
}

namespace {

std::vector<std::string> split_ws(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) words.push_back(w);
    return words;
}

// Applies the merge table to one word given as code points.
std::vector<std::string> merge_word(std::vector<std::string> pieces,
                                    const std::map<std::pair<std::string, std::string>, int>& rank) {
    if (pieces.size() < 2 || rank.empty()) return pieces;
    while (pieces.size() >= 2) {
        int best_rank = -1;
        size_t best_pos = 0;
        for (size_t i = 0; i + 1 < pieces.size(); ++i) {
            auto it = rank.find({pieces[i], pieces[i + 1]});
            if (it == rank.end()) continue;
            if (best_rank < 0 || it->second < best_rank) {
                best_rank = it->second;
                best_pos = i;
            }
        }
        if (best_rank < 0) break;
        // merge every occurrence of the winning pair, left to right
        const std::string l = pieces[best_pos], r = pieces[best_pos + 1];
        std::vector<std::string> next;
        next.reserve(pieces.size());
        for (size_t i = 0; i < pieces.size();) {
            if (i + 1 < pieces.size() && pieces[i] == l && pieces[i + 1] == r) {
                next.push_back(l + r);
                i += 2;
            } else {
                next.push_back(pieces[i]);
                i += 1;
            }
        }
        pieces = std::move(next);
    }
    return pieces;
}

std::map<std::pair<std::string, std::string>, int> merge_ranks(const std::vector<BpeMerge>& ms) {
    std::map<std::pair<std::string, std::string>, int> rank;
    for (size_t i = 0; i < ms.size(); ++i) rank.emplace(std::pair{ms[i].left, ms[i].right}, static_cast<int>(i));
    return rank;
}

}  // namespace

std::vector<BpeMerge> train_bpe(const std::vector<std::string>& corpus_lines, int merges) {
    if (merges < 0) throw ConfigError("merge count must be non-negative");
    // distinct words with frequencies, each as its current piece sequence
    std::map<std::string, long> word_freq;
    for (const auto& line : corpus_lines)
        for (const auto& w : split_ws(line)) word_freq[w] += 1;
    if (word_freq.empty()) throw ConfigError("BPE training corpus contains no tokens");

    std::vector<std::pair<std::vector<std::string>, long>> words;
    words.reserve(word_freq.size());
    for (const auto& [w, f] : word_freq) words.emplace_back(utf8_chars(w), f);

    std::vector<BpeMerge> table;
    for (int round = 0; round < merges; ++round) {
        std::map<std::pair<std::string, std::string>, long> counts;
        for (const auto& [pieces, f] : words)
            for (size_t i = 0; i + 1 < pieces.size(); ++i)
                counts[{pieces[i], pieces[i + 1]}] += f;
        if (counts.empty()) break;
        auto best = counts.begin();
        for (auto it = counts.begin(); it != counts.end(); ++it)
            if (it->second > best->second) best = it;  // std::map order breaks ties low
        if (best->second < 2) break;  // merging a one-off pair buys nothing

        const auto [l, r] = best->first;
        table.push_back({l, r});
        for (auto& [pieces, f] : words) {
            if (pieces.size() < 2) continue;
            std::vector<std::string> next;
            next.reserve(pieces.size());
            for (size_t i = 0; i < pieces.size();) {
                if (i + 1 < pieces.size() && pieces[i] == l && pieces[i + 1] == r) {
                    next.push_back(l + r);
                    i += 2;
                } else {
                    next.push_back(pieces[i]);
                    i += 1;
                }
            }
            pieces = std::move(next);
        }
    }
    return table;
}

std::vector<BpeMerge> load_merges(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw LoadError("cannot open merges file: " + path);
    std::vector<BpeMerge> out;
    std::string line;
    long lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        BpeMerge m;
        if (!(ss >> m.left >> m.right)) throw ParseError("merge line needs two fields", lineno);
        std::string extra;
        if (ss >> extra) throw ParseError("merge line has trailing fields", lineno);
        out.push_back(std::move(m));
    }
    return out;
}

void save_merges(const std::string& path, const std::vector<BpeMerge>& merges) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw LoadError("cannot write merges file: " + path);
    for (const auto& m : merges) os << m.left << ' ' << m.right << '\n';
}

Tokenizer::Tokenizer(TokenizerMode mode, std::vector<BpeMerge> merges)
    : mode_(mode), merges_(std::move(merges)) {}

std::vector<std::string> Tokenizer::tokenize(const std::string& text) const {
    const auto words = split_ws(text);
    std::vector<std::string> out;
    if (mode_ == TokenizerMode::word) {
        return words;
    }
    const auto rank = (mode_ == TokenizerMode::bpe) ? merge_ranks(merges_)
                                                    : std::map<std::pair<std::string, std::string>, int>{};
    for (size_t wi = 0; wi < words.size(); ++wi) {
        if (wi) out.push_back(kSpaceMark);
        auto pieces = utf8_chars(words[wi]);
        if (mode_ == TokenizerMode::bpe) pieces = merge_word(std::move(pieces), rank);
        for (auto& p : pieces) out.push_back(std::move(p));
    }
    return out;
}

std::string Tokenizer::detokenize(const std::vector<std::string>& tokens) const {
    std::string s;
    if (mode_ == TokenizerMode::word) {
        for (size_t i = 0; i < tokens.size(); ++i) {
            if (i) s += ' ';
            s += tokens[i];
        }
        return s;
    }
    for (const auto& t : tokens) s += (t == kSpaceMark) ? " " : t;
    return s;
}

}  // namespace chatnmt
