#include "cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <utility>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "chatnmt/corpus.hpp"
#include "chatnmt/error.hpp"
#include "chatnmt/inference.hpp"
#include "chatnmt/metrics.hpp"
#include "chatnmt/train.hpp"

namespace chatnmt {
namespace {

int to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int x = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("value for '" + key + "' is not an integer: '" + v + "'");
    }
}

long to_long(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        long x = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("value for '" + key + "' is not an integer: '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("value for '" + key + "' is not a number: '" + v + "'");
    }
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

Direction parse_direction(const std::string& s) {
    if (s == "forward") return Direction::forward;
    if (s == "reverse") return Direction::reverse;
    throw ConfigError("direction must be forward or reverse, got '" + s + "'");
}

LatentSet parse_without(const std::string& csv) {
    LatentSet disabled = LatentSet::none();
    if (csv.empty() || csv == "none") return disabled;
    if (csv == "all") return LatentSet::all();
    for (const std::string& name : split_csv(csv))
        disabled.set(latent_kind_from_string(name), true);
    return disabled;
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

/// key=value per line; '#' opens a comment; later keys win within the file.
std::map<std::string, std::string> load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::map<std::string, std::string> out;
    std::string line;
    long no = 0;
    while (std::getline(in, line)) {
        ++no;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::string body = trim(line);
        if (body.empty()) continue;
        size_t eq = body.find('=');
        if (eq == std::string::npos) throw ParseError("config line has no '='", no);
        std::string key = trim(body.substr(0, eq));
        std::string value = trim(body.substr(eq + 1));
        if (key.empty()) throw ParseError("config line has an empty key", no);
        out[key] = value;
    }
    return out;
}

Tokenizer make_tokenizer(const std::string& mode_str, const std::string& merges_path) {
    TokenizerMode mode = tokenizer_mode_from_string(mode_str);
    if (mode == TokenizerMode::bpe) {
        if (merges_path.empty()) throw ConfigError("the bpe tokenizer needs --merges");
        return Tokenizer(mode, load_merges(merges_path));
    }
    return Tokenizer(mode);
}

void require_value(const std::string& value, const std::string& flag) {
    if (value.empty()) throw ConfigError("--" + flag + " is required (flag or config file)");
}

// ---------------------------------------------------------------- train ----

struct TrainSettings {
    ModelConfig model;
    TrainConfig tcfg;
    bool stage_explicit = false;  // stage came from a flag or config key
    std::string corpus;
    std::string vocab_file;
    std::string merges_file;
    std::string tokenizer_mode = "word";
    std::string out_dir;
    std::string init_ckpt;
    std::string direction = "forward";
    std::string without;
};

using Setter = std::function<void(const std::string&)>;

/// Every trainable setting, by the name shared between --flags and config
/// file keys. One place to add a knob.
std::map<std::string, Setter> train_setters(TrainSettings& s) {
    std::map<std::string, Setter> m;
    m["stage"] = [&s](const std::string& v) {
        s.tcfg.stage = to_int("stage", v);
        s.stage_explicit = true;
    };
    m["steps"] = [&s](const std::string& v) { s.tcfg.max_steps = to_long("steps", v); };
    m["batch-tokens"] = [&s](const std::string& v) { s.tcfg.batch_tokens = to_int("batch-tokens", v); };
    m["anneal-steps"] = [&s](const std::string& v) { s.tcfg.anneal_steps = to_long("anneal-steps", v); };
    m["window"] = [&s](const std::string& v) { s.tcfg.context_window = to_int("window", v); };
    m["seed"] = [&s](const std::string& v) {
        s.tcfg.seed = static_cast<unsigned long long>(to_long("seed", v));
    };
    m["checkpoint-every"] = [&s](const std::string& v) {
        s.tcfg.checkpoint_every = to_long("checkpoint-every", v);
    };
    m["warmup"] = [&s](const std::string& v) { s.tcfg.warmup_steps = to_int("warmup", v); };
    m["lr-scale"] = [&s](const std::string& v) { s.tcfg.lr_scale = to_double("lr-scale", v); };
    m["clip"] = [&s](const std::string& v) { s.tcfg.clip_norm = to_double("clip", v); };
    m["d"] = [&s](const std::string& v) { s.model.d = to_int("d", v); };
    m["d-ff"] = [&s](const std::string& v) { s.model.d_ff = to_int("d-ff", v); };
    m["heads"] = [&s](const std::string& v) { s.model.heads = to_int("heads", v); };
    m["enc-layers"] = [&s](const std::string& v) { s.model.n_enc = to_int("enc-layers", v); };
    m["dec-layers"] = [&s](const std::string& v) { s.model.n_dec = to_int("dec-layers", v); };
    m["d-z"] = [&s](const std::string& v) { s.model.d_z = to_int("d-z", v); };
    m["num-roles"] = [&s](const std::string& v) { s.model.num_roles = to_int("num-roles", v); };
    m["max-turns"] = [&s](const std::string& v) { s.model.max_turns = to_int("max-turns", v); };
    m["max-positions"] = [&s](const std::string& v) {
        s.model.max_positions = to_int("max-positions", v);
    };
    m["dropout"] = [&s](const std::string& v) { s.model.dropout = to_double("dropout", v); };
    m["label-smoothing"] = [&s](const std::string& v) {
        s.model.label_smoothing = to_double("label-smoothing", v);
    };
    m["corpus"] = [&s](const std::string& v) { s.corpus = v; };
    m["vocab"] = [&s](const std::string& v) { s.vocab_file = v; };
    m["merges"] = [&s](const std::string& v) { s.merges_file = v; };
    m["tokenizer"] = [&s](const std::string& v) { s.tokenizer_mode = v; };
    m["out-dir"] = [&s](const std::string& v) { s.out_dir = v; };
    m["init"] = [&s](const std::string& v) { s.init_ckpt = v; };
    m["direction"] = [&s](const std::string& v) { s.direction = v; };
    m["without"] = [&s](const std::string& v) { s.without = v; };
    return m;
}

struct TrainCmdState {
    std::string config_path;
    std::map<std::string, std::string> flag_values;
};

void add_train_flags(CLI::App* cmd, TrainCmdState& st) {
    cmd->add_option("--config", st.config_path,
                    "key=value settings file; explicit flags take precedence");
    static const std::vector<std::pair<const char*, const char*>> kFlags = {
        {"stage", "training stage, 1 or 2"},
        {"steps", "number of optimizer steps"},
        {"batch-tokens", "source+target token budget per batch"},
        {"anneal-steps", "KL multiplier ramp length"},
        {"window", "context window in turns"},
        {"seed", "master random seed"},
        {"checkpoint-every", "checkpoint cadence in steps (0 = final only)"},
        {"warmup", "learning-rate warmup steps"},
        {"lr-scale", "multiplier on the inverse-sqrt schedule"},
        {"clip", "global gradient-norm bound"},
        {"d", "model width"},
        {"d-ff", "feed-forward width"},
        {"heads", "attention heads"},
        {"enc-layers", "encoder depth"},
        {"dec-layers", "decoder depth"},
        {"d-z", "latent width"},
        {"num-roles", "speaker role table size"},
        {"max-turns", "turn-index table size"},
        {"max-positions", "positional table size"},
        {"dropout", "dropout probability"},
        {"label-smoothing", "label smoothing mass"},
        {"corpus", "training corpus JSONL"},
        {"vocab", "vocabulary file"},
        {"merges", "BPE merges file"},
        {"tokenizer", "tokenizer mode: word, character, bpe"},
        {"out-dir", "directory for checkpoints and the step log"},
        {"init", "stage-1 checkpoint to initialize a stage-2 backbone"},
        {"direction", "translated side: forward or reverse"},
        {"without", "comma-separated latents to ablate (role,dia,tra or all)"},
    };
    for (const auto& [name, desc] : kFlags)
        cmd->add_option("--" + std::string(name), st.flag_values[name], desc);
}

/// Defaults, then config file, then explicit flags.
TrainSettings merge_train_settings(CLI::App* cmd, const TrainCmdState& st) {
    TrainSettings s;
    auto setters = train_setters(s);
    if (!st.config_path.empty()) {
        for (const auto& [key, value] : load_config_file(st.config_path)) {
            auto it = setters.find(key);
            if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
            if (cmd->get_option("--" + key)->count() == 0) it->second(value);
        }
    }
    for (const auto& [name, setter] : setters)
        if (cmd->get_option("--" + name)->count() > 0) setter(st.flag_values.at(name));
    return s;
}

void cmd_train(TrainSettings s, bool is_ablate, std::ostream& out, std::ostream& err) {
    if (is_ablate) {
        if (s.stage_explicit && s.tcfg.stage != 2)
            throw ConfigError("ablate runs stage 2; drop --stage " +
                              std::to_string(s.tcfg.stage));
        s.tcfg.stage = 2;
    }
    require_value(s.corpus, "corpus");
    require_value(s.vocab_file, "vocab");
    require_value(s.out_dir, "out-dir");

    LatentSet disabled = parse_without(s.without);
    if (s.tcfg.stage == 1 && disabled.count() > 0)
        throw ConfigError("ablation (--without) applies to stage 2 only");
    s.tcfg.disabled = disabled;
    Direction dir = parse_direction(s.direction);

    Vocabulary vocab = Vocabulary::load(s.vocab_file);
    Tokenizer tok = make_tokenizer(s.tokenizer_mode, s.merges_file);
    s.model.vocab_size = vocab.size();
    s.model.validate();
    s.tcfg.validate();

    std::vector<Dialogue> corpus;
    for (const RawDialogue& raw : load_corpus(s.corpus))
        corpus.push_back(
            encode_dialogue(raw, tok, vocab, s.model.num_roles, s.model.max_turns, &err));
    std::vector<ChatExample> examples = examples_from_corpus(corpus, dir, s.tcfg.context_window);

    Rng rng(s.tcfg.seed);
    LatentSet active = LatentSet::all();
    for (LatentKind kind : kAllLatentKinds)
        if (disabled.has(kind)) active.set(kind, false);
    Model model = s.tcfg.stage == 1 ? Model(s.model, 1, LatentSet::none(), rng)
                                    : Model(s.model, 2, active, rng);
    if (!s.init_ckpt.empty()) {
        if (s.tcfg.stage != 2) throw ConfigError("--init loads a stage-1 backbone into stage 2");
        init_stage2_from_stage1(model, s.init_ckpt);
    }

    std::filesystem::create_directories(s.out_dir);
    std::ofstream log((std::filesystem::path(s.out_dir) / "train.log").string());
    if (!log) throw Error("cannot write " + s.out_dir + "/train.log");
    TrainHooks hooks;
    hooks.report_log = &log;
    hooks.progress = &err;
    hooks.checkpoint_dir = s.out_dir;

    TrainResult res = train(model, examples, s.tcfg, hooks);
    double final_loss = res.reports.empty() ? 0.0 : res.reports.back().loss;
    out << "steps=" << res.steps << " final_loss=" << std::setprecision(17) << final_loss
        << "\n";
}

// -------------------------------------------------------------- prepare ----

struct PrepareFlags {
    std::string corpus;
    std::string out_dir;
    std::string tokenizer_mode = "word";
    int merges = 200;
    int vocab_cap = 0;
};

void cmd_prepare(const PrepareFlags& f, std::ostream& out, std::ostream&) {
    TokenizerMode mode = tokenizer_mode_from_string(f.tokenizer_mode);
    if (f.merges < 0) throw ConfigError("--merges must be non-negative");
    if (f.vocab_cap < 0) throw ConfigError("--vocab-size must be non-negative");

    std::vector<RawDialogue> raw = load_corpus(f.corpus);
    std::vector<std::string> lines;
    long turns = 0;
    for (const RawDialogue& d : raw) {
        for (const RawTurn& t : d.turns) {
            lines.push_back(t.src);
            lines.push_back(t.tgt);
            ++turns;
        }
    }

    std::filesystem::create_directories(f.out_dir);
    std::vector<BpeMerge> merge_table;
    if (mode == TokenizerMode::bpe) {
        merge_table = train_bpe(lines, f.merges);
        save_merges((std::filesystem::path(f.out_dir) / "merges.txt").string(), merge_table);
    }
    Tokenizer tok(mode, merge_table);

    std::vector<std::vector<std::string>> tokenized;
    tokenized.reserve(lines.size());
    for (const std::string& line : lines) tokenized.push_back(tok.tokenize(line));
    Vocabulary vocab = Vocabulary::build(tokenized, static_cast<size_t>(f.vocab_cap));
    vocab.save((std::filesystem::path(f.out_dir) / "vocab.txt").string());

    out << "dialogues=" << raw.size() << " turns=" << turns << " vocab=" << vocab.size();
    if (mode == TokenizerMode::bpe) out << " merges=" << merge_table.size();
    out << "\n";
}

// ------------------------------------------------------------ translate ----

struct TranslateFlags {
    std::string model;
    std::string corpus;
    std::string vocab_file;
    std::string merges_file;
    std::string tokenizer_mode = "word";
    std::string out_path = "-";
    int beam = 4;
    double alpha = 0.6;
    int max_length = 64;
    std::string mode = "gold";
    std::string latent = "mean";
    std::string direction = "forward";
    std::string inverse;
    int window = 3;
    long seed = 1;
};

void cmd_translate(const TranslateFlags& f, std::ostream& out, std::ostream&) {
    if (f.latent != "mean" && f.latent != "sample")
        throw ConfigError("--latent must be mean or sample, got '" + f.latent + "'");
    ReplayMode mode = replay_mode_from_string(f.mode);
    Direction dir = parse_direction(f.direction);

    BeamConfig bcfg;
    bcfg.beam_size = f.beam;
    bcfg.alpha = f.alpha;
    bcfg.max_length = f.max_length;
    bcfg.sample_latents = f.latent == "sample";
    bcfg.validate();

    Model model = load_model(f.model);
    Vocabulary vocab = Vocabulary::load(f.vocab_file);
    if (vocab.size() != model.config().vocab_size)
        throw ValidationError("vocabulary has " + std::to_string(vocab.size()) +
                              " entries but the model expects " +
                              std::to_string(model.config().vocab_size));
    Tokenizer tok = make_tokenizer(f.tokenizer_mode, f.merges_file);

    std::optional<Model> inverse;
    if (mode == ReplayMode::back_translate) {
        if (f.inverse.empty())
            throw ConfigError("--inverse (an inverse-direction checkpoint) is required "
                              "for back_translate replay");
        inverse.emplace(load_model(f.inverse));
    }
    std::optional<Rng> rng;
    if (bcfg.sample_latents) rng.emplace(static_cast<uint64_t>(f.seed));

    std::ofstream file_out;
    if (f.out_path != "-") {
        file_out.open(f.out_path);
        if (!file_out) throw Error("cannot write " + f.out_path);
    }
    std::ostream& sink = f.out_path == "-" ? out : file_out;

    for (const RawDialogue& raw : load_corpus(f.corpus)) {
        Dialogue d = encode_dialogue(raw, tok, vocab, model.config().num_roles,
                                     model.config().max_turns, nullptr);
        std::vector<TurnOutput> outputs =
            replay_dialogue(model, d, dir, mode, bcfg, f.window, rng ? &*rng : nullptr,
                            inverse ? &*inverse : nullptr);
        for (const TurnOutput& turn : outputs) {
            nlohmann::json j;
            j["id"] = d.id;
            j["turn"] = turn.turn;
            j["hyp"] = tok.detokenize(vocab.decode(turn.tokens));
            if (!turn.finished) j["unfinished"] = true;
            sink << j.dump() << "\n";
        }
    }
}

// ------------------------------------------------- evaluate / coherence ----

std::map<std::pair<std::string, int>, std::string> load_hyp_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open hypothesis file " + path);
    std::map<std::pair<std::string, int>, std::string> out;
    std::string line;
    long no = 0;
    while (std::getline(in, line)) {
        ++no;
        if (trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ParseError("hypothesis line is not valid JSON", no);
        if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("turn") ||
            !j["turn"].is_number_integer() || !j.contains("hyp") || !j["hyp"].is_string())
            throw ParseError("hypothesis records need a string id, integer turn, string hyp", no);
        std::pair<std::string, int> key{j["id"].get<std::string>(), j["turn"].get<int>()};
        if (out.count(key))
            throw ParseError("duplicate hypothesis for " + key.first + " turn " +
                                 std::to_string(key.second),
                             no);
        out[key] = j["hyp"].get<std::string>();
    }
    return out;
}

const std::string& hyp_for(const std::map<std::pair<std::string, int>, std::string>& hyps,
                           const std::string& id, int turn) {
    auto it = hyps.find({id, turn});
    if (it == hyps.end())
        throw ValidationError("no hypothesis for dialogue " + id + " turn " +
                              std::to_string(turn));
    return it->second;
}

struct EvaluateFlags {
    std::string hyp;
    std::string ref;
    std::string direction = "forward";
    bool lowercase = false;
    bool char_bleu = false;
};

void cmd_evaluate(const EvaluateFlags& f, std::ostream& out, std::ostream&) {
    Direction dir = parse_direction(f.direction);
    auto hyps_by_key = load_hyp_jsonl(f.hyp);

    std::vector<std::string> hyps, refs;
    for (const RawDialogue& d : load_corpus(f.ref)) {
        for (size_t t = 0; t < d.turns.size(); ++t) {
            const std::string& ref_text =
                dir == Direction::forward ? d.turns[t].tgt : d.turns[t].src;
            hyps.push_back(hyp_for(hyps_by_key, d.id, static_cast<int>(t)));
            refs.push_back(ref_text);
        }
    }

    BleuConfig bc;
    bc.lowercase = f.lowercase;
    bc.character_level = f.char_bleu;
    BleuBreakdown b = bleu(hyps, refs, bc);

    // Corpus TER: total edits over total reference words.
    long total_edits = 0, total_ref = 0;
    for (size_t i = 0; i < hyps.size(); ++i) {
        long ref_len = static_cast<long>(tokenize_words(refs[i], false).size());
        total_edits += std::lround(ter(hyps[i], refs[i]) * static_cast<double>(ref_len));
        total_ref += ref_len;
    }
    double corpus_ter =
        total_ref == 0 ? 0.0 : static_cast<double>(total_edits) / static_cast<double>(total_ref);

    out << "BLEU = " << std::fixed << std::setprecision(2) << b.score << "\n";
    out << "TER = " << std::fixed << std::setprecision(3) << corpus_ter << "\n";
}

struct CoherenceFlags {
    std::string hyp;
    std::string corpus;
    std::string vectors;
    std::string direction = "forward";
    std::string depths = "1,2,3";
};

void cmd_coherence(const CoherenceFlags& f, std::ostream& out, std::ostream&) {
    Direction dir = parse_direction(f.direction);
    auto hyps_by_key = load_hyp_jsonl(f.hyp);
    WordVectors wv = WordVectors::load(f.vectors);

    std::vector<int> depths;
    for (const std::string& d : split_csv(f.depths)) {
        int k = to_int("depths", d);
        if (k <= 0) throw ConfigError("--depths entries must be positive, got " + d);
        depths.push_back(k);
    }
    if (depths.empty()) throw ConfigError("--depths needs at least one depth");

    std::vector<DialoguePair> pairs;
    for (const RawDialogue& d : load_corpus(f.corpus)) {
        DialoguePair p;
        for (size_t t = 0; t < d.turns.size(); ++t) {
            p.translations.push_back(hyp_for(hyps_by_key, d.id, static_cast<int>(t)));
            p.history.push_back(dir == Direction::forward ? d.turns[t].tgt : d.turns[t].src);
        }
        pairs.push_back(std::move(p));
    }

    out << "depth\tmean\tpairs\tskipped\n";
    for (const CoherenceDepth& row : coherence_report(pairs, wv, depths)) {
        out << row.depth << '\t';
        if (row.pairs > 0)
            out << std::fixed << std::setprecision(4) << row.mean;
        else
            out << '-';
        out << '\t' << row.pairs << '\t' << row.skipped << "\n";
    }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"dialogue-aware translation toolkit"};
    app.name("chatnmt");
    app.require_subcommand(1);

    CLI::App* prepare = app.add_subcommand("prepare", "tokenize a corpus and build vocabulary");
    PrepareFlags pf;
    prepare->add_option("--corpus", pf.corpus, "raw corpus JSONL")->required();
    prepare->add_option("--out-dir", pf.out_dir, "where vocab.txt (and merges.txt) land")
        ->required();
    prepare->add_option("--tokenizer", pf.tokenizer_mode, "word, character, or bpe");
    prepare->add_option("--merges", pf.merges, "BPE merge count (bpe mode)");
    prepare->add_option("--vocab-size", pf.vocab_cap, "vocabulary cap, 0 = unbounded");

    CLI::App* train_cmd = app.add_subcommand("train", "run stage-1 or stage-2 training");
    TrainCmdState train_state;
    add_train_flags(train_cmd, train_state);

    CLI::App* ablate = app.add_subcommand("ablate", "stage-2 training with latents disabled");
    TrainCmdState ablate_state;
    add_train_flags(ablate, ablate_state);
    ablate->get_option("--without")->required();

    CLI::App* translate = app.add_subcommand("translate", "decode a corpus turn by turn");
    TranslateFlags tf;
    translate->add_option("--model", tf.model, "model checkpoint")->required();
    translate->add_option("--corpus", tf.corpus, "corpus JSONL to translate")->required();
    translate->add_option("--vocab", tf.vocab_file, "vocabulary file")->required();
    translate->add_option("--merges", tf.merges_file, "BPE merges file");
    translate->add_option("--tokenizer", tf.tokenizer_mode, "word, character, or bpe");
    translate->add_option("--out", tf.out_path, "output JSONL path, - for stdout");
    translate->add_option("--beam", tf.beam, "beam width");
    translate->add_option("--alpha", tf.alpha, "length-penalty strength");
    translate->add_option("--max-length", tf.max_length, "generation cap per utterance");
    translate->add_option("--mode", tf.mode, "context source: gold, self, back_translate");
    translate->add_option("--latent", tf.latent, "latent mode: mean or sample");
    translate->add_option("--direction", tf.direction, "translated side: forward or reverse");
    translate->add_option("--inverse", tf.inverse, "inverse checkpoint for back_translate");
    translate->add_option("--window", tf.window, "context window in turns");
    translate->add_option("--seed", tf.seed, "noise seed for --latent sample");

    CLI::App* evaluate = app.add_subcommand("evaluate", "score hypotheses with BLEU and TER");
    EvaluateFlags ef;
    evaluate->add_option("--hyp", ef.hyp, "hypothesis JSONL")->required();
    evaluate->add_option("--ref", ef.ref, "reference corpus JSONL")->required();
    evaluate->add_option("--direction", ef.direction, "which side is the reference");
    evaluate->add_flag("--lowercase", ef.lowercase, "case-insensitive scoring");
    evaluate->add_flag("--char-bleu", ef.char_bleu, "character-level BLEU");

    CLI::App* coherence_cmd =
        app.add_subcommand("coherence", "similarity of translations to dialogue history");
    CoherenceFlags cf;
    coherence_cmd->add_option("--hyp", cf.hyp, "hypothesis JSONL")->required();
    coherence_cmd->add_option("--corpus", cf.corpus, "corpus JSONL with the history")->required();
    coherence_cmd->add_option("--vectors", cf.vectors, "word-vector file")->required();
    coherence_cmd->add_option("--direction", cf.direction, "which side is the history");
    coherence_cmd->add_option("--depths", cf.depths, "comma-separated history depths");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);

        if (prepare->parsed()) cmd_prepare(pf, out, err);
        if (train_cmd->parsed())
            cmd_train(merge_train_settings(train_cmd, train_state), false, out, err);
        if (ablate->parsed()) cmd_train(merge_train_settings(ablate, ablate_state), true, out, err);
        if (translate->parsed()) cmd_translate(tf, out, err);
        if (evaluate->parsed()) cmd_evaluate(ef, out, err);
        if (coherence_cmd->parsed()) cmd_coherence(cf, out, err);
        return 0;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace chatnmt
