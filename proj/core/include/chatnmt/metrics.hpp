#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace chatnmt {

/// Word split in the style of the standard BLEU tokenizer: ASCII
/// punctuation becomes its own token, alphanumerics and multi-byte UTF-8
/// sequences stay glued, whitespace separates. Lowercasing is ASCII-only.
std::vector<std::string> tokenize_words(const std::string& text, bool lowercase);

/// One token per UTF-8 code point, whitespace dropped.
std::vector<std::string> tokenize_characters(const std::string& text, bool lowercase);

struct BleuConfig {
    int max_order = 4;
    bool lowercase = false;        // false keeps mixed case
    bool character_level = false;  // character instead of word tokens

    void validate() const;  // ConfigError on violations
};

/// Corpus-level BLEU with the usual exponential smoothing: orders with zero
/// matches fall back to 100 / (2^k * total), and any order with no n-grams
/// at all zeroes the score.
struct BleuBreakdown {
    double score = 0.0;               // 0..100
    std::vector<double> precisions;   // percent, per order, after smoothing
    double brevity_penalty = 0.0;
    long hyp_length = 0;
    long ref_length = 0;
};

/// One reference per hypothesis, aligned by index. ContractError on an
/// empty corpus or mismatched lengths.
BleuBreakdown bleu(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references, const BleuConfig& cfg = {});

/// Translation edit rate: word-level edit distance plus block shifts,
/// divided by the reference length. Shifts follow the common greedy
/// heuristic — repeatedly apply the block move (length <= 10, block must
/// occur verbatim in the reference) that lowers the edit distance most.
/// ContractError on an empty reference.
double ter(const std::vector<std::string>& hyp, const std::vector<std::string>& ref);
double ter(const std::string& hyp, const std::string& ref);

/// Plain-text embedding table: header line "count dim", then one token and
/// its values per line. Unknown tokens read as zero vectors.
class WordVectors {
public:
    WordVectors() = default;
    explicit WordVectors(int dim) : dim_(dim) {}

    static WordVectors load(const std::string& path);  // ValidationError on malformed files

    void set(const std::string& token, std::vector<double> values);
    /// Zero vector for unknown tokens.
    std::vector<double> get(const std::string& token) const;
    bool contains(const std::string& token) const { return table_.count(token) > 0; }
    int dim() const { return dim_; }
    size_t size() const { return table_.size(); }

private:
    int dim_ = 0;
    std::unordered_map<std::string, std::vector<double>> table_;
};

/// Cosine similarity of the two sentences' mean word vectors. DomainError
/// when either mean has (near-)zero norm — all tokens unknown, or no tokens.
double coherence(const std::vector<std::string>& a, const std::vector<std::string>& b,
                 const WordVectors& vectors);
double coherence(const std::string& a, const std::string& b, const WordVectors& vectors);

/// One dialogue's aligned texts: the translation produced for each turn and
/// the target-side reference of each turn, in turn order.
struct DialoguePair {
    std::vector<std::string> translations;
    std::vector<std::string> history;
};

struct CoherenceDepth {
    int depth = 0;
    double mean = 0.0;  // meaningful only when pairs > 0
    long pairs = 0;     // pairs that produced a similarity
    long skipped = 0;   // eligible pairs dropped for undefined similarity
};

/// For each depth k: the mean similarity between a turn's translation and
/// the target-side utterance k turns earlier, over every turn that has one.
std::vector<CoherenceDepth> coherence_report(const std::vector<DialoguePair>& dialogues,
                                             const WordVectors& vectors,
                                             const std::vector<int>& depths = {1, 2, 3});

}  // namespace chatnmt
