#pragma once

#include <vector>

#include "chatnmt/corpus.hpp"
#include "chatnmt/rng.hpp"
#include "chatnmt/vocab.hpp"

namespace chatnmt {

/// A context window flattened to one sequence: [cls] u1 [sep] u2 [sep] ...
/// with parallel role and turn indices per token. The cls token inherits the
/// role/turn of the first utterance (0 when there is none); each sep inherits
/// them from the utterance it closes. Reserved token ids come from
/// Vocabulary's fixed slots.
struct SerializedContext {
    std::vector<int> tokens;
    std::vector<int> roles;
    std::vector<int> turns;
};

SerializedContext serialize_context(const std::vector<Utterance>& utterances);

/// One padded index matrix (row-major rows x cols) with everything the
/// four-way embedding needs, plus the 0/1 validity mask.
struct PaddedSeq {
    int rows = 0;
    int cols = 0;
    std::vector<int> ids;
    std::vector<int> roles;
    std::vector<int> turns;
    std::vector<int> positions;
    std::vector<double> mask;

    int at(int r, int c) const { return ids[static_cast<size_t>(r) * cols + c]; }
};

/// Model-ready slice of examples. y_in is the teacher-forcing input
/// (bos + reference), y_out the aligned prediction target (reference + eos);
/// y_out also serves as the posterior encoder's view of the full target.
struct Batch {
    PaddedSeq x;
    PaddedSeq y_in;
    PaddedSeq y_out;
    PaddedSeq ctx_role;
    PaddedSeq ctx_x;
    PaddedSeq ctx_y;
    int example_count = 0;
    long target_tokens = 0;  // non-pad entries of y_out, the CE denominator
};

/// Builds the batch holding exactly the given examples, in order.
Batch make_batch(const std::vector<ChatExample>& examples);

/// Packs examples greedily, in order, so that source+target token counts
/// stay within max_tokens per batch (a single oversized example still forms
/// its own batch). Pass shuffle_rng to permute the example order first;
/// identical seeds give identical batch sequences. Every example lands in
/// exactly one batch.
std::vector<Batch> make_batches(const std::vector<ChatExample>& examples, int max_tokens,
                                Rng* shuffle_rng = nullptr);

}  // namespace chatnmt
