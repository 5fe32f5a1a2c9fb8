#include "chatnmt/batch.hpp"

#include <algorithm>

#include "chatnmt/error.hpp"

namespace chatnmt {

SerializedContext serialize_context(const std::vector<Utterance>& utterances) {
    SerializedContext s;
    const int first_role = utterances.empty() ? 0 : utterances.front().role_id;
    const int first_turn = utterances.empty() ? 0 : utterances.front().turn_index;
    s.tokens.push_back(Vocabulary::kCls);
    s.roles.push_back(first_role);
    s.turns.push_back(first_turn);
    for (size_t i = 0; i < utterances.size(); ++i) {
        const Utterance& u = utterances[i];
        if (i) {
            // sep closes the previous utterance
            s.tokens.push_back(Vocabulary::kSep);
            s.roles.push_back(utterances[i - 1].role_id);
            s.turns.push_back(utterances[i - 1].turn_index);
        }
        for (int tok : u.tokens) {
            s.tokens.push_back(tok);
            s.roles.push_back(u.role_id);
            s.turns.push_back(u.turn_index);
        }
    }
    return s;
}

namespace {

struct RowSpec {
    const std::vector<int>* tokens;
    const std::vector<int>* roles;   // per-token, or null -> constant
    const std::vector<int>* turns;
    int const_role = 0;
    int const_turn = 0;
};

PaddedSeq pack_rows(const std::vector<RowSpec>& rows) {
    PaddedSeq p;
    p.rows = static_cast<int>(rows.size());
    int width = 1;
    for (const auto& r : rows) width = std::max(width, static_cast<int>(r.tokens->size()));
    p.cols = width;
    const size_t n = static_cast<size_t>(p.rows) * width;
    p.ids.assign(n, Vocabulary::kPad);
    p.roles.assign(n, 0);
    p.turns.assign(n, 0);
    p.positions.assign(n, 0);
    p.mask.assign(n, 0.0);
    for (int r = 0; r < p.rows; ++r) {
        const auto& spec = rows[static_cast<size_t>(r)];
        const auto& toks = *spec.tokens;
        for (size_t c = 0; c < toks.size(); ++c) {
            const size_t at = static_cast<size_t>(r) * width + c;
            p.ids[at] = toks[c];
            p.roles[at] = spec.roles ? (*spec.roles)[c] : spec.const_role;
            p.turns[at] = spec.turns ? (*spec.turns)[c] : spec.const_turn;
            p.positions[at] = static_cast<int>(c);
            p.mask[at] = 1.0;
        }
        // pad columns keep index 0 everywhere; the mask excludes them
        for (size_t c = toks.size(); c < static_cast<size_t>(width); ++c)
            p.positions[static_cast<size_t>(r) * width + c] = static_cast<int>(c);
    }
    return p;
}

}  // namespace

Batch make_batch(const std::vector<ChatExample>& examples) {
    if (examples.empty()) throw ContractError("cannot build an empty batch");
    Batch b;
    b.example_count = static_cast<int>(examples.size());

    std::vector<std::vector<int>> y_in_rows, y_out_rows;
    std::vector<SerializedContext> ctx_role_rows, ctx_x_rows, ctx_y_rows;
    y_in_rows.reserve(examples.size());
    y_out_rows.reserve(examples.size());
    for (const auto& ex : examples) {
        std::vector<int> yin;
        yin.reserve(ex.y_u.tokens.size() + 1);
        yin.push_back(Vocabulary::kBos);
        yin.insert(yin.end(), ex.y_u.tokens.begin(), ex.y_u.tokens.end());
        std::vector<int> yout(ex.y_u.tokens);
        yout.push_back(Vocabulary::kEos);
        y_in_rows.push_back(std::move(yin));
        y_out_rows.push_back(std::move(yout));
        ctx_role_rows.push_back(serialize_context(ex.c_role));
        ctx_x_rows.push_back(serialize_context(ex.c_x));
        ctx_y_rows.push_back(serialize_context(ex.c_y));
        b.target_tokens += static_cast<long>(ex.y_u.tokens.size()) + 1;
    }

    std::vector<RowSpec> xs, yis, yos, crs, cxs, cys;
    for (size_t i = 0; i < examples.size(); ++i) {
        const auto& ex = examples[i];
        xs.push_back({&ex.x_u.tokens, nullptr, nullptr, ex.x_u.role_id, ex.x_u.turn_index});
        yis.push_back({&y_in_rows[i], nullptr, nullptr, ex.y_u.role_id, ex.y_u.turn_index});
        yos.push_back({&y_out_rows[i], nullptr, nullptr, ex.y_u.role_id, ex.y_u.turn_index});
        crs.push_back({&ctx_role_rows[i].tokens, &ctx_role_rows[i].roles, &ctx_role_rows[i].turns});
        cxs.push_back({&ctx_x_rows[i].tokens, &ctx_x_rows[i].roles, &ctx_x_rows[i].turns});
        cys.push_back({&ctx_y_rows[i].tokens, &ctx_y_rows[i].roles, &ctx_y_rows[i].turns});
    }
    b.x = pack_rows(xs);
    b.y_in = pack_rows(yis);
    b.y_out = pack_rows(yos);
    b.ctx_role = pack_rows(crs);
    b.ctx_x = pack_rows(cxs);
    b.ctx_y = pack_rows(cys);
    return b;
}

std::vector<Batch> make_batches(const std::vector<ChatExample>& examples, int max_tokens,
                                Rng* shuffle_rng) {
    if (max_tokens <= 0) throw ContractError("batch token budget must be positive");
    std::vector<size_t> order(examples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (shuffle_rng) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng->index(i)]);
    }

    std::vector<Batch> out;
    std::vector<ChatExample> pending;
    long pending_tokens = 0;
    auto flush = [&]() {
        if (pending.empty()) return;
        out.push_back(make_batch(pending));
        pending.clear();
        pending_tokens = 0;
    };
    for (size_t idx : order) {
        const auto& ex = examples[idx];
        const long cost = static_cast<long>(ex.x_u.tokens.size() + ex.y_u.tokens.size() + 1);
        if (!pending.empty() && pending_tokens + cost > max_tokens) flush();
        pending.push_back(ex);
        pending_tokens += cost;
    }
    flush();
    return out;
}

}  // namespace chatnmt
