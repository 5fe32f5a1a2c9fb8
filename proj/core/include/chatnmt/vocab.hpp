#pragma once

#include <array>
#include <string>
#include <unordered_map>
#include <vector>

namespace chatnmt {

/// Token <-> id bijection with six reserved entries at fixed ids. The file
/// form is one token per line, line number = id, reserved tokens first.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kCls = 4;
    static constexpr int kSep = 5;
    static constexpr int kReservedCount = 6;

    static const std::array<std::string, kReservedCount>& reserved();

    /// Reserved tokens only.
    Vocabulary();

    /// From an explicit ordered token list that must begin with the reserved
    /// six; throws ValidationError otherwise or on duplicates.
    explicit Vocabulary(std::vector<std::string> tokens);

    /// Collects the vocabulary of a tokenized corpus: reserved tokens, then
    /// corpus tokens by descending frequency (ties broken lexicographically).
    /// max_size 0 means unbounded; otherwise the total size is capped.
    static Vocabulary build(const std::vector<std::vector<std::string>>& tokenized_lines,
                            size_t max_size = 0);

    static Vocabulary load(const std::string& path);
    void save(const std::string& path) const;

    int size() const { return static_cast<int>(tokens_.size()); }
    bool contains(const std::string& tok) const { return index_.count(tok) > 0; }

    /// kUnk for unknown tokens.
    int id(const std::string& tok) const;
    /// Throws ValidationError when id is out of range.
    const std::string& token(int id) const;

    std::vector<int> encode(const std::vector<std::string>& toks) const;
    std::vector<std::string> decode(const std::vector<int>& ids) const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace chatnmt
