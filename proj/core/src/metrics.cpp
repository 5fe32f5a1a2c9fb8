#include "chatnmt/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "chatnmt/error.hpp"

namespace chatnmt {

namespace {

bool is_word_byte(unsigned char c) {
    return std::isalnum(c) != 0 || c >= 0x80;  // multi-byte sequences stay glued
}

char fold(char c, bool lowercase) {
    return lowercase ? static_cast<char>(std::tolower(static_cast<unsigned char>(c))) : c;
}

}  // namespace

std::vector<std::string> tokenize_words(const std::string& text, bool lowercase) {
    std::vector<std::string> out;
    std::string cur;
    for (char raw : text) {
        unsigned char c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
        } else if (is_word_byte(c)) {
            cur.push_back(fold(raw, lowercase));
        } else {  // ASCII punctuation / symbols stand alone
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
            out.push_back(std::string(1, fold(raw, lowercase)));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::vector<std::string> tokenize_characters(const std::string& text, bool lowercase) {
    std::vector<std::string> out;
    for (size_t i = 0; i < text.size();) {
        unsigned char c = static_cast<unsigned char>(text[i]);
        size_t len = 1;
        if (c >= 0xF0)
            len = 4;
        else if (c >= 0xE0)
            len = 3;
        else if (c >= 0xC0)
            len = 2;
        len = std::min(len, text.size() - i);
        if (len == 1 && std::isspace(c)) {
            ++i;
            continue;
        }
        std::string tok = text.substr(i, len);
        if (len == 1) tok[0] = fold(tok[0], lowercase);
        out.push_back(std::move(tok));
        i += len;
    }
    return out;
}

void BleuConfig::validate() const {
    if (max_order < 1) throw ConfigError("BLEU order must be at least 1");
}

BleuBreakdown bleu(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references, const BleuConfig& cfg) {
    cfg.validate();
    if (hypotheses.empty()) throw ContractError("cannot score an empty corpus");
    if (hypotheses.size() != references.size())
        throw ContractError("hypothesis and reference counts differ");

    const int order = cfg.max_order;
    std::vector<long> matches(static_cast<size_t>(order), 0);
    std::vector<long> totals(static_cast<size_t>(order), 0);
    BleuBreakdown out;

    for (size_t i = 0; i < hypotheses.size(); ++i) {
        std::vector<std::string> hyp =
            cfg.character_level ? tokenize_characters(hypotheses[i], cfg.lowercase)
                                : tokenize_words(hypotheses[i], cfg.lowercase);
        std::vector<std::string> ref =
            cfg.character_level ? tokenize_characters(references[i], cfg.lowercase)
                                : tokenize_words(references[i], cfg.lowercase);
        out.hyp_length += static_cast<long>(hyp.size());
        out.ref_length += static_cast<long>(ref.size());

        for (int n = 1; n <= order; ++n) {
            long hyp_count = static_cast<long>(hyp.size()) - n + 1;
            if (hyp_count <= 0) break;
            totals[static_cast<size_t>(n - 1)] += hyp_count;

            // Clipped counts: each hypothesis n-gram scores at most as often
            // as it appears in the reference.
            std::map<std::vector<std::string>, long> ref_grams;
            for (size_t j = 0; j + n <= ref.size(); ++j)
                ++ref_grams[{ref.begin() + static_cast<long>(j), ref.begin() + static_cast<long>(j + n)}];
            std::map<std::vector<std::string>, long> hyp_grams;
            for (size_t j = 0; j + static_cast<size_t>(n) <= hyp.size(); ++j)
                ++hyp_grams[{hyp.begin() + static_cast<long>(j), hyp.begin() + static_cast<long>(j + n)}];
            for (const auto& [gram, count] : hyp_grams) {
                auto it = ref_grams.find(gram);
                if (it != ref_grams.end())
                    matches[static_cast<size_t>(n - 1)] += std::min(count, it->second);
            }
        }
    }

    out.precisions.resize(static_cast<size_t>(order), 0.0);
    double smooth = 1.0;
    bool zero_order = false;
    for (int n = 0; n < order; ++n) {
        size_t k = static_cast<size_t>(n);
        if (totals[k] == 0) {
            zero_order = true;
        } else if (matches[k] == 0) {
            smooth *= 2.0;
            out.precisions[k] = 100.0 / (smooth * static_cast<double>(totals[k]));
        } else {
            out.precisions[k] = 100.0 * static_cast<double>(matches[k]) / static_cast<double>(totals[k]);
        }
    }

    out.brevity_penalty =
        (out.hyp_length >= out.ref_length || out.hyp_length == 0)
            ? (out.hyp_length == 0 ? 0.0 : 1.0)
            : std::exp(1.0 - static_cast<double>(out.ref_length) / static_cast<double>(out.hyp_length));

    if (zero_order || out.hyp_length == 0) {
        out.score = 0.0;
        return out;
    }
    double log_sum = 0.0;
    for (double p : out.precisions) log_sum += std::log(p);
    out.score = out.brevity_penalty * std::exp(log_sum / order);
    return out;
}

namespace {

long edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<long> row(b.size() + 1);
    for (size_t j = 0; j <= b.size(); ++j) row[j] = static_cast<long>(j);
    for (size_t i = 1; i <= a.size(); ++i) {
        long diag = row[0];
        row[0] = static_cast<long>(i);
        for (size_t j = 1; j <= b.size(); ++j) {
            long sub = diag + (a[i - 1] == b[j - 1] ? 0 : 1);
            diag = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, sub});
        }
    }
    return row[b.size()];
}

bool occurs_in(const std::vector<std::string>& block, const std::vector<std::string>& ref) {
    if (block.size() > ref.size()) return false;
    for (size_t j = 0; j + block.size() <= ref.size(); ++j)
        if (std::equal(block.begin(), block.end(), ref.begin() + static_cast<long>(j))) return true;
    return false;
}

std::vector<std::string> apply_shift(const std::vector<std::string>& words, size_t start,
                                     size_t len, size_t dest) {
    std::vector<std::string> rest = words;
    rest.erase(rest.begin() + static_cast<long>(start), rest.begin() + static_cast<long>(start + len));
    std::vector<std::string> out = rest;
    out.insert(out.begin() + static_cast<long>(dest), words.begin() + static_cast<long>(start),
               words.begin() + static_cast<long>(start + len));
    return out;
}

constexpr size_t kMaxShiftLen = 10;

}  // namespace

double ter(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
    if (ref.empty()) throw ContractError("TER needs a non-empty reference");

    std::vector<std::string> cur = hyp;
    long dist = edit_distance(cur, ref);
    long shifts = 0;

    // Greedily apply the block move that helps most until none helps. Each
    // accepted shift strictly lowers the edit distance, so this terminates.
    while (dist > 0 && !cur.empty()) {
        long best_dist = dist;
        size_t best_start = 0, best_len = 0, best_dest = 0;
        for (size_t start = 0; start < cur.size(); ++start) {
            size_t max_len = std::min(kMaxShiftLen, cur.size() - start);
            for (size_t len = 1; len <= max_len; ++len) {
                std::vector<std::string> block(cur.begin() + static_cast<long>(start),
                                               cur.begin() + static_cast<long>(start + len));
                if (!occurs_in(block, ref)) continue;
                for (size_t dest = 0; dest + len <= cur.size(); ++dest) {
                    if (dest == start) continue;
                    long d = edit_distance(apply_shift(cur, start, len, dest), ref);
                    if (d < best_dist) {
                        best_dist = d;
                        best_start = start;
                        best_len = len;
                        best_dest = dest;
                    }
                }
            }
        }
        if (best_len == 0) break;
        cur = apply_shift(cur, best_start, best_len, best_dest);
        dist = best_dist;
        ++shifts;
    }
    return static_cast<double>(shifts + dist) / static_cast<double>(ref.size());
}

double ter(const std::string& hyp, const std::string& ref) {
    return ter(tokenize_words(hyp, false), tokenize_words(ref, false));
}

WordVectors WordVectors::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open word-vector file " + path);
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("word-vector file is empty: " + path);
    std::istringstream header(line);
    long count = 0;
    int dim = 0;
    if (!(header >> count >> dim) || count < 0 || dim <= 0)
        throw ValidationError("word-vector header must be 'count dim': " + path);

    WordVectors wv(dim);
    long line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string token;
        row >> token;
        std::vector<double> values(static_cast<size_t>(dim));
        for (int i = 0; i < dim; ++i)
            if (!(row >> values[static_cast<size_t>(i)]))
                throw ValidationError("line " + std::to_string(line_no) + " of " + path +
                                      " has fewer than " + std::to_string(dim) + " values");
        double extra;
        if (row >> extra)
            throw ValidationError("line " + std::to_string(line_no) + " of " + path +
                                  " has more than " + std::to_string(dim) + " values");
        if (wv.contains(token))
            throw ValidationError("duplicate token '" + token + "' in " + path);
        wv.set(token, std::move(values));
    }
    if (static_cast<long>(wv.size()) != count)
        throw ValidationError(path + " declares " + std::to_string(count) + " vectors but holds " +
                              std::to_string(wv.size()));
    return wv;
}

void WordVectors::set(const std::string& token, std::vector<double> values) {
    if (dim_ == 0) dim_ = static_cast<int>(values.size());
    if (static_cast<int>(values.size()) != dim_)
        throw ValidationError("vector for '" + token + "' has dimension " +
                              std::to_string(values.size()) + ", expected " + std::to_string(dim_));
    table_[token] = std::move(values);
}

std::vector<double> WordVectors::get(const std::string& token) const {
    auto it = table_.find(token);
    if (it != table_.end()) return it->second;
    return std::vector<double>(static_cast<size_t>(dim_), 0.0);
}

namespace {

std::vector<double> mean_vector(const std::vector<std::string>& tokens, const WordVectors& wv) {
    std::vector<double> sum(static_cast<size_t>(wv.dim()), 0.0);
    for (const std::string& tok : tokens) {
        std::vector<double> v = wv.get(tok);
        for (size_t i = 0; i < sum.size(); ++i) sum[i] += v[i];
    }
    if (!tokens.empty())
        for (double& x : sum) x /= static_cast<double>(tokens.size());
    return sum;
}

}  // namespace

double coherence(const std::vector<std::string>& a, const std::vector<std::string>& b,
                 const WordVectors& vectors) {
    std::vector<double> va = mean_vector(a, vectors);
    std::vector<double> vb = mean_vector(b, vectors);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < va.size(); ++i) {
        dot += va[i] * vb[i];
        na += va[i] * va[i];
        nb += vb[i] * vb[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na <= 1e-12 || nb <= 1e-12)
        throw DomainError("similarity undefined: a sentence has no known words");
    return dot / (na * nb);
}

double coherence(const std::string& a, const std::string& b, const WordVectors& vectors) {
    return coherence(tokenize_words(a, false), tokenize_words(b, false), vectors);
}

std::vector<CoherenceDepth> coherence_report(const std::vector<DialoguePair>& dialogues,
                                             const WordVectors& vectors,
                                             const std::vector<int>& depths) {
    for (const DialoguePair& d : dialogues)
        if (d.translations.size() != d.history.size())
            throw ContractError("translations and history must align turn for turn");

    std::vector<CoherenceDepth> out;
    for (int depth : depths) {
        if (depth < 1) throw ContractError("coherence depth must be at least 1");
        CoherenceDepth row;
        row.depth = depth;
        double sum = 0.0;
        for (const DialoguePair& d : dialogues) {
            for (size_t t = static_cast<size_t>(depth); t < d.translations.size(); ++t) {
                try {
                    sum += coherence(d.translations[t], d.history[t - static_cast<size_t>(depth)],
                                     vectors);
                    ++row.pairs;
                } catch (const DomainError&) {
                    ++row.skipped;
                }
            }
        }
        if (row.pairs > 0) row.mean = sum / static_cast<double>(row.pairs);
        out.push_back(row);
    }
    return out;
}

}  // namespace chatnmt
