#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "chatnmt/tokenizer.hpp"
#include "chatnmt/vocab.hpp"

namespace chatnmt {

/// One dialogue turn as read from disk: parallel text plus the speaker.
struct RawTurn {
    std::string src;
    std::string tgt;
    int role = 0;
};

struct RawDialogue {
    std::string id;
    std::vector<RawTurn> turns;
};

/// Reads UTF-8 JSONL, one dialogue per line:
///   {"id": str, "turns": [{"src": str, "tgt": str, "role": int}]}
/// Malformed records raise ParseError with the line number; a negative role
/// raises ValidationError.
std::vector<RawDialogue> load_corpus(const std::string& path);
void save_corpus(const std::string& path, const std::vector<RawDialogue>& dialogues);

enum class Side { source, target };

struct Utterance {
    std::vector<int> tokens;
    int role_id = 0;
    int turn_index = 0;
    Side side = Side::source;
};

/// Aligned (source, target) utterance pairs, one per turn.
struct Dialogue {
    std::string id;
    std::vector<std::pair<Utterance, Utterance>> turns;
};

/// Which file field is translated: forward reads "src" as the input side,
/// reverse swaps them (used for the inverse back-translation model).
enum class Direction { forward, reverse };

/// Tokenizes and numbers a dialogue. role >= num_roles raises
/// ValidationError; turn indices past max_turns are clamped to max_turns-1
/// (real dialogues outrun the table), with a note to *warn when given.
/// An utterance that tokenizes to nothing raises ValidationError.
Dialogue encode_dialogue(const RawDialogue& raw, const Tokenizer& tok, const Vocabulary& vocab,
                         int num_roles, int max_turns, std::ostream* warn = nullptr);

/// The current turn plus its three history sets.
struct ChatExample {
    std::string dialogue_id;
    int turn = 0;
    Utterance x_u;
    Utterance y_u;
    std::vector<Utterance> c_role;  // prior input-side utterances of x_u's speaker
    std::vector<Utterance> c_x;     // prior input-side utterances, most recent `window`
    std::vector<Utterance> c_y;     // their aligned output-side utterances
};

/// History selection: c_x takes the min(window, turn) most recent input-side
/// utterances before the current turn, c_y their aligned translations, and
/// c_role the most recent prior utterances sharing x_u's role, capped at
/// window. window=0 leaves all three empty. Throws std::out_of_range when
/// turn does not index a turn of the dialogue.
ChatExample build_context_sets(const Dialogue& d, int turn, Direction dir, int window);

std::vector<ChatExample> examples_from_corpus(const std::vector<Dialogue>& corpus, Direction dir,
                                              int window);

}  // namespace chatnmt
