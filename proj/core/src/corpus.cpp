#include "chatnmt/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "chatnmt/error.hpp"

namespace chatnmt {

using nlohmann::json;

std::vector<RawDialogue> load_corpus(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw LoadError("cannot open corpus: " + path);
    std::vector<RawDialogue> out;
    std::string line;
    long lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(std::string("invalid JSON: ") + e.what(), lineno);
        }
        if (!j.is_object() || !j.contains("id") || !j["id"].is_string() ||
            !j.contains("turns") || !j["turns"].is_array())
            throw ParseError("dialogue record needs string \"id\" and array \"turns\"", lineno);
        RawDialogue d;
        d.id = j["id"].get<std::string>();
        for (const auto& t : j["turns"]) {
            if (!t.is_object() || !t.contains("src") || !t["src"].is_string() ||
                !t.contains("tgt") || !t["tgt"].is_string() || !t.contains("role") ||
                !t["role"].is_number_integer())
                throw ParseError("turn needs string \"src\", string \"tgt\", integer \"role\"",
                                 lineno);
            RawTurn turn;
            turn.src = t["src"].get<std::string>();
            turn.tgt = t["tgt"].get<std::string>();
            turn.role = t["role"].get<int>();
            if (turn.role < 0)
                throw ValidationError("negative role id in dialogue " + d.id + " (line " +
                                      std::to_string(lineno) + ")");
            d.turns.push_back(std::move(turn));
        }
        out.push_back(std::move(d));
    }
    return out;
}

void save_corpus(const std::string& path, const std::vector<RawDialogue>& dialogues) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw LoadError("cannot write corpus: " + path);
    for (const auto& d : dialogues) {
        json turns = json::array();
        for (const auto& t : d.turns)
            turns.push_back({{"src", t.src}, {"tgt", t.tgt}, {"role", t.role}});
        json j = {{"id", d.id}, {"turns", turns}};
        os << j.dump() << '\n';
    }
}

Dialogue encode_dialogue(const RawDialogue& raw, const Tokenizer& tok, const Vocabulary& vocab,
                         int num_roles, int max_turns, std::ostream* warn) {
    Dialogue d;
    d.id = raw.id;
    bool clamped = false;
    for (size_t i = 0; i < raw.turns.size(); ++i) {
        const RawTurn& t = raw.turns[i];
        if (t.role >= num_roles)
            throw ValidationError("role id " + std::to_string(t.role) + " in dialogue " + raw.id +
                                  " exceeds the configured " + std::to_string(num_roles) +
                                  " roles");
        int turn_index = static_cast<int>(i);
        if (turn_index >= max_turns) {
            turn_index = max_turns - 1;
            clamped = true;
        }
        Utterance su, tu;
        su.tokens = vocab.encode(tok.tokenize(t.src));
        tu.tokens = vocab.encode(tok.tokenize(t.tgt));
        if (su.tokens.empty() || tu.tokens.empty())
            throw ValidationError("empty utterance at turn " + std::to_string(i) +
                                  " of dialogue " + raw.id);
        su.role_id = tu.role_id = t.role;
        su.turn_index = tu.turn_index = turn_index;
        su.side = Side::source;
        tu.side = Side::target;
        d.turns.emplace_back(std::move(su), std::move(tu));
    }
    if (clamped && warn)
        *warn << "warning: dialogue " << raw.id << " exceeds " << max_turns
              << " turns; later turn indices clamped\n";
    return d;
}

ChatExample build_context_sets(const Dialogue& d, int turn, Direction dir, int window) {
    if (turn < 0 || static_cast<size_t>(turn) >= d.turns.size())
        throw std::out_of_range("turn " + std::to_string(turn) + " outside dialogue " + d.id +
                                " of " + std::to_string(d.turns.size()) + " turns");
    if (window < 0) throw ContractError("context window must be non-negative");

    auto x_of = [dir](const std::pair<Utterance, Utterance>& t) -> const Utterance& {
        return dir == Direction::forward ? t.first : t.second;
    };
    auto y_of = [dir](const std::pair<Utterance, Utterance>& t) -> const Utterance& {
        return dir == Direction::forward ? t.second : t.first;
    };

    ChatExample ex;
    ex.dialogue_id = d.id;
    ex.turn = turn;
    ex.x_u = x_of(d.turns[static_cast<size_t>(turn)]);
    ex.y_u = y_of(d.turns[static_cast<size_t>(turn)]);

    const int lo = std::max(0, turn - window);
    for (int t = lo; t < turn; ++t) {
        ex.c_x.push_back(x_of(d.turns[static_cast<size_t>(t)]));
        ex.c_y.push_back(y_of(d.turns[static_cast<size_t>(t)]));
    }
    if (window > 0) {
        // most recent prior same-role turns, oldest first in the output
        std::vector<const Utterance*> picked;
        for (int t = turn - 1; t >= 0 && static_cast<int>(picked.size()) < window; --t) {
            const Utterance& u = x_of(d.turns[static_cast<size_t>(t)]);
            if (u.role_id == ex.x_u.role_id) picked.push_back(&u);
        }
        for (auto it = picked.rbegin(); it != picked.rend(); ++it) ex.c_role.push_back(**it);
    }
    return ex;
}

std::vector<ChatExample> examples_from_corpus(const std::vector<Dialogue>& corpus, Direction dir,
                                              int window) {
    std::vector<ChatExample> out;
    for (const auto& d : corpus)
        for (size_t t = 0; t < d.turns.size(); ++t)
            out.push_back(build_context_sets(d, static_cast<int>(t), dir, window));
    return out;
}

}  // namespace chatnmt
