#include "chatnmt/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "chatnmt/error.hpp"

namespace chatnmt {

const std::array<std::string, Vocabulary::kReservedCount>& Vocabulary::reserved() {
    static const std::array<std::string, kReservedCount> r = {"<pad>", "<bos>", "<eos>",
                                                              "<unk>", "[cls]", "[sep]"};
    return r;
}

Vocabulary::Vocabulary() {
    for (const auto& t : reserved()) {
        index_[t] = static_cast<int>(tokens_.size());
        tokens_.push_back(t);
    }
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
    if (tokens.size() < kReservedCount)
        throw ValidationError("vocabulary must start with the " +
                              std::to_string(kReservedCount) + " reserved tokens");
    for (int i = 0; i < kReservedCount; ++i)
        if (tokens[static_cast<size_t>(i)] != reserved()[static_cast<size_t>(i)])
            throw ValidationError("vocabulary slot " + std::to_string(i) + " must be " +
                                  reserved()[static_cast<size_t>(i)] + ", got " +
                                  tokens[static_cast<size_t>(i)]);
    tokens_ = std::move(tokens);
    for (size_t i = 0; i < tokens_.size(); ++i) {
        auto [it, fresh] = index_.emplace(tokens_[i], static_cast<int>(i));
        if (!fresh) throw ValidationError("duplicate vocabulary token: " + tokens_[i]);
    }
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& tokenized_lines,
                             size_t max_size) {
    std::map<std::string, long> freq;  // ordered map: lexicographic tie-break for free
    for (const auto& line : tokenized_lines)
        for (const auto& tok : line) freq[tok] += 1;
    for (const auto& r : reserved()) freq.erase(r);

    std::vector<std::pair<std::string, long>> by_count(freq.begin(), freq.end());
    std::stable_sort(by_count.begin(), by_count.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });

    std::vector<std::string> toks(reserved().begin(), reserved().end());
    for (const auto& [tok, n] : by_count) {
        if (max_size && toks.size() >= max_size) break;
        toks.push_back(tok);
    }
    return Vocabulary(std::move(toks));
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw LoadError("cannot open vocabulary file: " + path);
    std::vector<std::string> toks;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        toks.push_back(line);
    }
    return Vocabulary(std::move(toks));
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw LoadError("cannot write vocabulary file: " + path);
    for (const auto& t : tokens_) os << t << '\n';
}

int Vocabulary::id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size())
        throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(size()));
    return tokens_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& toks) const {
    std::vector<int> ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(id(t));
    return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
    std::vector<std::string> toks;
    toks.reserve(ids.size());
    for (int i : ids) toks.push_back(token(i));
    return toks;
}

}  // namespace chatnmt
