#pragma once

#include <string>
#include <vector>

namespace chatnmt {

/// One learned merge: adjacent (left, right) become left+right.
struct BpeMerge {
    std::string left;
    std::string right;
    bool operator==(const BpeMerge&) const = default;
};

enum class TokenizerMode { word, character, bpe };

TokenizerMode tokenizer_mode_from_string(const std::string& s);
std::string to_string(TokenizerMode m);

/// Splits UTF-8 text into code points (each returned as a string).
std::vector<std::string> utf8_chars(const std::string& text);

/// Learns a BPE merge table from raw corpus lines. Words are whitespace
/// units; word boundaries are carried by a dedicated separator token, so
/// merges never cross spaces. Picks the most frequent adjacent pair each
/// round (ties: lexicographically smallest), stopping early when no pair
/// occurs twice. Throws ConfigError when the corpus has no tokens.
std::vector<BpeMerge> train_bpe(const std::vector<std::string>& corpus_lines, int merges);

std::vector<BpeMerge> load_merges(const std::string& path);
void save_merges(const std::string& path, const std::vector<BpeMerge>& merges);

/// Text <-> surface tokens for all three modes. Round trip holds for
/// whitespace-normalized input: detokenize(tokenize(s)) == s.
class Tokenizer {
public:
    /// The between-word marker token used by character and bpe modes.
    static const std::string kSpaceMark;

    explicit Tokenizer(TokenizerMode mode, std::vector<BpeMerge> merges = {});

    TokenizerMode mode() const { return mode_; }
    const std::vector<BpeMerge>& merges() const { return merges_; }

    std::vector<std::string> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<std::string>& tokens) const;

private:
    TokenizerMode mode_;
    std::vector<BpeMerge> merges_;
};

}  // namespace chatnmt
