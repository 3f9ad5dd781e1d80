#include "sglab/cli.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "sglab/eval.hpp"
#include "sglab/random.hpp"
#include "sglab/sps.hpp"

namespace sglab::cli {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::uint64_t stage_seed(std::uint64_t master, Stage stage) {
    return mix_seed(master, static_cast<std::uint64_t>(stage));
}

RunConfig::RunConfig() {
    uq.methods = {"semgrad", "paragrad",         "hybridgrad",       "exgrad",      "gnll",
                  "ln_pe",   "self_consistency", "semantic_entropy", "semgrad_grid"};
}

synth::CorpusSpec RunConfig::corpus_spec() const {
    synth::CorpusSpec s = corpus;
    s.seed = stage_seed(seed, Stage::corpus);
    return s;
}

model::TransformerConfig RunConfig::model_config() const {
    model::TransformerConfig c = model;
    c.init_seed = stage_seed(seed, Stage::init);
    return c;
}

train::TrainConfig RunConfig::train_config() const {
    train::TrainConfig c = train;
    c.seed = stage_seed(seed, Stage::train);
    return c;
}

uq::UqConfig RunConfig::uq_config() const {
    uq::UqConfig c = uq;
    c.seed = stage_seed(seed, Stage::score);
    return c;
}

// ---------------------------------------------------------------------------
// Config text

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
        throw ConfigError(key + ": expected a non-negative integer, got \"" + v + "\"");
    }
    return out;
}

double parse_f64(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
        throw ConfigError(key + ": expected a number, got \"" + v + "\"");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got \"" + v + "\"");
}

std::vector<std::string> parse_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string fmt(double x) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

std::string fmt(std::uint64_t x) { return std::to_string(x); }

std::string join(const std::vector<std::string>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + xs[i];
    return out;
}

template <typename T>
void set_size(T& field, const std::string& key, const std::string& v) {
    field = static_cast<T>(parse_u64(key, v));
}

}  // namespace

void apply_setting(RunConfig& c, const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    auto& s = c.corpus;
    auto& m = c.model;
    auto& t = c.train;
    auto& u = c.uq;
    if (key == "seed") c.seed = parse_u64(key, v);
    else if (key == "threads") set_size(c.threads, key, v);
    else if (key == "n_keys") set_size(s.n_keys, key, v);
    else if (key == "surface_forms") set_size(s.surface_forms, key, v);
    else if (key == "multi_answer_fraction") s.multi_answer_fraction = parse_f64(key, v);
    else if (key == "answers_per_multi") set_size(s.answers_per_multi, key, v);
    else if (key == "holdout_fraction") s.holdout_fraction = parse_f64(key, v);
    else if (key == "key_token_len") set_size(s.key_token_len, key, v);
    else if (key == "template_len") set_size(s.template_len, key, v);
    else if (key == "answer_len") set_size(s.answer_len, key, v);
    else if (key == "template_begin") set_size(s.template_begin, key, v);
    else if (key == "key_begin") set_size(s.key_begin, key, v);
    else if (key == "answer_begin") set_size(s.answer_begin, key, v);
    else if (key == "vocab_end") set_size(s.vocab_end, key, v);
    else if (key == "n_layers") set_size(m.n_layers, key, v);
    else if (key == "d_model") set_size(m.d_model, key, v);
    else if (key == "n_heads") set_size(m.n_heads, key, v);
    else if (key == "d_ff") set_size(m.d_ff, key, v);
    else if (key == "vocab_size") set_size(m.vocab_size, key, v);
    else if (key == "max_seq_len") set_size(m.max_seq_len, key, v);
    else if (key == "epochs") set_size(t.epochs, key, v);
    else if (key == "batch_size") set_size(t.batch_size, key, v);
    else if (key == "learning_rate") t.learning_rate = parse_f64(key, v);
    else if (key == "beta1") t.beta1 = parse_f64(key, v);
    else if (key == "beta2") t.beta2 = parse_f64(key, v);
    else if (key == "adam_eps") t.eps = parse_f64(key, v);
    else if (key == "grad_clip_norm") t.grad_clip_norm = parse_f64(key, v);
    else if (key == "max_offset") set_size(c.max_offset, key, v);
    else if (key == "methods") u.methods = parse_list(v);
    else if (key == "tau") u.tau = parse_f64(key, v);
    else if (key == "beta") u.beta = parse_f64(key, v);
    else if (key == "mc_samples") set_size(u.mc_samples, key, v);
    else if (key == "temperature") u.temperature = parse_f64(key, v);
    else if (key == "norm") {
        if (v == "l1") u.norm = uq::GradNorm::l1;
        else if (v == "l2") u.norm = uq::GradNorm::l2;
        else throw ConfigError("norm: expected l1 or l2, got \"" + v + "\"");
    } else if (key == "entropy_weights") u.entropy_weights = parse_bool(key, v);
    else if (key == "max_new") set_size(u.max_new, key, v);
    else throw ConfigError("unknown config key \"" + key + "\"");
}

void apply_config_text(RunConfig& config, const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_number) + ": expected key = value");
        }
        try {
            apply_setting(config, trim(line.substr(0, eq)), line.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(line_number) + ": " + e.what());
        }
    }
}

void apply_config_file(RunConfig& config, const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(config, ss.str());
}

std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& c) {
    const auto& s = c.corpus;
    const auto& m = c.model;
    const auto& t = c.train;
    const auto& u = c.uq;
    return {
        {"seed", fmt(c.seed)},
        {"threads", fmt(c.threads)},
        {"n_keys", fmt(s.n_keys)},
        {"surface_forms", fmt(s.surface_forms)},
        {"multi_answer_fraction", fmt(s.multi_answer_fraction)},
        {"answers_per_multi", fmt(s.answers_per_multi)},
        {"holdout_fraction", fmt(s.holdout_fraction)},
        {"key_token_len", fmt(s.key_token_len)},
        {"template_len", fmt(s.template_len)},
        {"answer_len", fmt(s.answer_len)},
        {"template_begin", fmt(std::uint64_t{s.template_begin})},
        {"key_begin", fmt(std::uint64_t{s.key_begin})},
        {"answer_begin", fmt(std::uint64_t{s.answer_begin})},
        {"vocab_end", fmt(std::uint64_t{s.vocab_end})},
        {"n_layers", fmt(m.n_layers)},
        {"d_model", fmt(m.d_model)},
        {"n_heads", fmt(m.n_heads)},
        {"d_ff", fmt(m.d_ff)},
        {"vocab_size", fmt(m.vocab_size)},
        {"max_seq_len", fmt(m.max_seq_len)},
        {"epochs", fmt(t.epochs)},
        {"batch_size", fmt(t.batch_size)},
        {"learning_rate", fmt(t.learning_rate)},
        {"beta1", fmt(t.beta1)},
        {"beta2", fmt(t.beta2)},
        {"adam_eps", fmt(t.eps)},
        {"grad_clip_norm", fmt(t.grad_clip_norm)},
        {"max_offset", fmt(c.max_offset)},
        {"methods", join(u.methods)},
        {"tau", fmt(u.tau)},
        {"beta", fmt(u.beta)},
        {"mc_samples", fmt(u.mc_samples)},
        {"temperature", fmt(u.temperature)},
        {"norm", u.norm == uq::GradNorm::l1 ? "l1" : "l2"},
        {"entropy_weights", u.entropy_weights ? "true" : "false"},
        {"max_new", fmt(u.max_new)},
    };
}

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
        EVP_MD_CTX_free(ctx);
        throw std::runtime_error("sha256 init failed");
    }
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return hex.str();
}

void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
#endif
}

// ---------------------------------------------------------------------------
// Commands

namespace {

class UsageError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

void require_file(const fs::path& p, const char* what) {
    if (!fs::is_regular_file(p)) throw UsageError(std::string(what) + " file not found: " + p.string());
}

fs::path temp_path(const fs::path& target) {
    fs::path t = target;
    t += ".tmp";
    return t;
}

/// Runs `write(tmp)` then renames tmp over `target`.
template <typename Write>
void write_atomically(const fs::path& target, Write write) {
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = temp_path(target);
    write(tmp);
    fs::rename(tmp, target);
}

ordered_json config_json(const RunConfig& c) {
    ordered_json j = ordered_json::object();
    for (const auto& [k, v] : config_entries(c)) {
        if (v == "true" || v == "false") {
            j[k] = v == "true";
            continue;
        }
        std::uint64_t u = 0;
        auto r = std::from_chars(v.data(), v.data() + v.size(), u);
        if (r.ec == std::errc() && r.ptr == v.data() + v.size()) {
            j[k] = u;
            continue;
        }
        double d = 0.0;
        auto rd = std::from_chars(v.data(), v.data() + v.size(), d);
        if (rd.ec == std::errc() && rd.ptr == v.data() + v.size()) {
            j[k] = d;
            continue;
        }
        j[k] = v;
    }
    return j;
}

void gen_data(const RunConfig& cfg, const fs::path& out_path, std::ostream& out) {
    const synth::Dataset ds = synth::generate_corpus(cfg.corpus_spec());
    write_atomically(out_path, [&](const fs::path& p) { synth::write_jsonl(ds, p); });
    const auto held = std::count_if(ds.begin(), ds.end(), [](const auto& i) { return i.held_out; });
    const auto multi = std::count_if(ds.begin(), ds.end(), [](const auto& i) { return i.multi_answer; });
    out << "gen-data: " << ds.size() << " items, " << held << " held out, " << multi << " multi-answer -> "
        << out_path.string() << '\n';
}

void train_model(const RunConfig& cfg, const fs::path& data, const fs::path& ckpt, const fs::path& loss_csv,
                 std::ostream& out) {
    require_file(data, "data");
    const synth::Dataset ds = synth::read_jsonl(data);
    const train::TrainConfig tc = cfg.train_config();
    tc.validate();
    model::ModelState m = model::init_model(cfg.model_config());
    const train::TrainResult res = train::train(m, ds, tc);
    const double em = train::train_exact_match(m, ds, cfg.uq.max_new);
    write_atomically(ckpt, [&](const fs::path& p) { train::save_checkpoint(m, p); });
    write_atomically(loss_csv, [&](const fs::path& p) { train::write_loss_csv(res.epoch_loss, p); });
    out << "train: " << tc.epochs << " epochs, final loss " << fmt(res.epoch_loss.back()) << ", train exact-match "
        << fmt(em) << " -> " << ckpt.string() << '\n';
}

void run_sps(const RunConfig& cfg, const fs::path& ckpt, const fs::path& data, const fs::path& csv,
             const fs::path& selection_path, std::ostream& out) {
    require_file(ckpt, "checkpoint");
    require_file(data, "data");
    const model::ModelState m = train::load_checkpoint(ckpt);
    const synth::Dataset ds = synth::read_jsonl(data);
    std::size_t shortest = std::numeric_limits<std::size_t>::max();
    for (const auto& item : ds)
        for (std::size_t v = 0; v < item.variant_count(); ++v) shortest = std::min(shortest, item.variant(v).size());
    const std::size_t offsets = cfg.max_offset ? cfg.max_offset : sps::default_max_offset(ds);
    if (offsets > shortest) {
        throw UsageError("max offset " + std::to_string(offsets) + " exceeds the shortest query length " +
                         std::to_string(shortest));
    }
    const sps::SpsTable table = sps::sps_table(sps::collect_hidden_states(m, ds, offsets));
    const sps::SpsSelection sel = sps::select_semantic_token(table);
    write_atomically(csv, [&](const fs::path& p) { sps::write_table_csv(table, p); });
    write_atomically(selection_path, [&](const fs::path& p) { sps::write_selection_json(sel, p); });
    std::string band;
    for (std::size_t l : sel.band) band += (band.empty() ? "" : ",") + std::to_string(l);
    out << "sps: " << table.cells.size() << " cells, t_star " << sel.t_star << ", band [" << band << "] -> "
        << csv.string() << '\n';
}

void run_score(const RunConfig& cfg, const fs::path& ckpt, const fs::path& data, const fs::path& selection_path,
               const fs::path& scores_path, std::ostream& out, std::ostream& err) {
    uq::UqConfig uc = cfg.uq_config();
    require_file(ckpt, "checkpoint");
    require_file(data, "data");
    require_file(selection_path, "selection");
    const model::ModelState m = train::load_checkpoint(ckpt);
    const synth::Dataset ds = synth::read_jsonl(data);
    const sps::SpsSelection sel = sps::read_selection_json(selection_path);
    uc.t_star = sel.t_star;
    uc.band = sel.band;
    uc.grid_max_offset = sel.per_offset_mean.size();
    uc.validate();

    const uq::BatchResult res = uq::score_dataset(m, ds, uc, cfg.threads);
    for (std::uint64_t id : res.excluded_ids) err << "score: record " << id << " excluded (empty response)\n";

    eval::ScoreTable table;
    table.methods = uq::score_columns(uc, m.config.n_layers);
    std::size_t excluded_samples = 0;
    for (const auto& r : res.records) {
        const auto& item = *std::find_if(ds.begin(), ds.end(), [&](const auto& i) { return i.id == r.record_id; });
        eval::EvalRecord er;
        er.id = r.record_id;
        er.correct = eval::judge_correct(r.generation.content(), item.answers);
        er.omega_bar = r.generation.mean_entropy;
        for (const auto& [name, value] : r.scores) er.scores.push_back(value);
        table.records.push_back(std::move(er));
        excluded_samples += r.excluded_samples;
    }
    if (excluded_samples) err << "score: " << excluded_samples << " empty samples excluded from ln_pe/pe\n";
    write_atomically(scores_path, [&](const fs::path& p) { eval::write_scores_csv(table, p); });
    out << "score: " << table.records.size() << " records, " << res.excluded_ids.size() << " excluded, "
        << table.methods.size() << " score columns -> " << scores_path.string() << '\n';
}

void run_eval(const RunConfig& cfg, const fs::path& scores_path, const fs::path& sps_path, const fs::path& data,
              const fs::path& report_path, const fs::path& risk_path, std::ostream& out) {
    require_file(scores_path, "scores");
    eval::ScoreTable table = eval::read_scores_csv(scores_path);
    std::size_t excluded = 0;
    if (!data.empty()) {
        require_file(data, "data");
        const synth::Dataset ds = synth::read_jsonl(data);
        eval::attach_split_flags(table, ds);
        excluded = ds.size() - table.records.size();
    }
    std::optional<sps::SpsTable> sps_table;
    if (!sps_path.empty()) {
        require_file(sps_path, "sps");
        sps_table = sps::read_table_csv(sps_path);
    }
    const eval::EvalReport rep =
        eval::build_report(table, sps_table ? &*sps_table : nullptr, excluded, cfg.seed, config_json(cfg));
    write_atomically(report_path, [&](const fs::path& p) {
        const fs::path risk_tmp = temp_path(risk_path);
        eval::emit_report(rep, p, risk_tmp);
        fs::rename(risk_tmp, risk_path);
    });
    out << "eval: n " << rep.n << ", excluded " << rep.excluded;
    for (const auto& [name, s] : rep.methods) {
        if (name.rfind("semgrad_l", 0) == 0) continue;
        out << ", " << name << " auroc " << std::fixed << std::setprecision(4) << s.auroc << std::defaultfloat;
    }
    out << " -> " << report_path.string() << '\n';
}

void write_manifest(const RunConfig& cfg, const fs::path& dir) {
    ordered_json j;
    j["seed"] = cfg.seed;
    j["artifacts"] = ordered_json::array();
    for (const char* name : kPrimaryArtifacts) {
        j["artifacts"].push_back({{"name", name}, {"sha256", sha256_file(dir / name)},
                                  {"bytes", fs::file_size(dir / name)}});
    }
    j["auxiliary"] = ordered_json::array();
    for (const char* name : kAuxiliaryArtifacts) {
        j["auxiliary"].push_back({{"name", name}, {"sha256", sha256_file(dir / name)},
                                  {"bytes", fs::file_size(dir / name)}});
    }
    write_atomically(dir / "manifest.json", [&](const fs::path& p) {
        std::ofstream o(p, std::ios::binary | std::ios::trunc);
        o << j.dump(2) << '\n';
        if (!o) throw std::runtime_error("write to " + p.string() + " failed");
    });
}

void run_pipeline(const RunConfig& cfg, const fs::path& dir, std::ostream& out, std::ostream& err) {
    fs::create_directories(dir);
    auto done = [&](std::initializer_list<const char*> names) {
        return std::all_of(names.begin(), names.end(), [&](const char* n) { return fs::is_regular_file(dir / n); });
    };
    auto skip = [&](const char* stage) { out << stage << ": outputs present, skipped\n"; };

    if (done({"dataset.jsonl"})) skip("gen-data");
    else gen_data(cfg, dir / "dataset.jsonl", out);

    if (done({"model.ckpt", "loss.csv"})) skip("train");
    else train_model(cfg, dir / "dataset.jsonl", dir / "model.ckpt", dir / "loss.csv", out);

    if (done({"sps.csv", "selection.json"})) skip("sps");
    else run_sps(cfg, dir / "model.ckpt", dir / "dataset.jsonl", dir / "sps.csv", dir / "selection.json", out);

    if (done({"scores.csv"})) skip("score");
    else run_score(cfg, dir / "model.ckpt", dir / "dataset.jsonl", dir / "selection.json", dir / "scores.csv", out, err);

    if (done({"report.json", "risk_coverage.csv"})) skip("eval");
    else run_eval(cfg, dir / "scores.csv", dir / "sps.csv", dir / "dataset.jsonl", dir / "report.json",
                  dir / "risk_coverage.csv", out);

    write_manifest(cfg, dir);
    out << "pipeline: manifest -> " << (dir / "manifest.json").string() << '\n';
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Gradient-based uncertainty lab: data, training, SPS, scoring, evaluation"};
    app.require_subcommand(1);

    RunConfig cfg;
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    auto common = [&](CLI::App* sub, const char* config_flag) {
        sub->add_option(config_flag, config_path, "Flat key = value config file");
        sub->add_option("--set", overrides, "Override one config key (key=value), repeatable");
        sub->add_option("--seed", seed, "Master seed");
    };

    std::string out_path, data_path, ckpt_path, loss_path, selection_path, scores_path, sps_path, risk_path;

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic QA corpus");
    common(gen, "--spec");
    gen->add_option("--out", out_path, "Dataset JSONL path")->required();

    auto* trn = app.add_subcommand("train", "Train a model on a dataset");
    common(trn, "--config");
    trn->add_option("--data", data_path, "Dataset JSONL")->required();
    trn->add_option("--out-ckpt", ckpt_path, "Checkpoint path")->required();
    trn->add_option("--loss-csv", loss_path, "Loss curve CSV (default: loss.csv beside the checkpoint)");

    std::optional<std::size_t> max_offset;
    auto* sp = app.add_subcommand("sps", "Semantic preservation grid and token selection");
    common(sp, "--config");
    sp->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
    sp->add_option("--data", data_path, "Dataset JSONL")->required();
    sp->add_option("--max-offset", max_offset, "Token offsets to probe (default min(8, shortest query))");
    sp->add_option("--out", out_path, "SPS CSV path")->required();
    sp->add_option("--selection-out", selection_path, "Selection JSON (default: selection.json beside --out)");

    std::string methods, norm;
    std::optional<double> tau, beta, temperature;
    std::optional<std::size_t> mc_samples, threads, max_new;
    bool no_entropy_weights = false;
    auto* sc = app.add_subcommand("score", "Score every query with the requested methods");
    common(sc, "--config");
    sc->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
    sc->add_option("--data", data_path, "Dataset JSONL")->required();
    sc->add_option("--selection", selection_path, "Selection JSON")->required();
    sc->add_option("--methods", methods, "Comma-separated method names");
    sc->add_option("--tau", tau, "HybridGrad temperature (> 0)");
    sc->add_option("--beta", beta, "HybridGrad ParaGrad scale (>= 0)");
    sc->add_option("--mc-samples", mc_samples, "Samples for sampling baselines");
    sc->add_option("--temperature", temperature, "Sampling temperature");
    sc->add_option("--threads", threads, "Worker threads");
    sc->add_option("--max-new", max_new, "Generation length cap");
    sc->add_option("--norm", norm, "Gradient norm: l1 or l2");
    sc->add_flag("--no-entropy-weights", no_entropy_weights, "Replace every omega_t by 1");
    sc->add_option("--out", out_path, "Scores CSV path")->required();

    auto* ev = app.add_subcommand("eval", "AUROC / AURC report from a scores CSV");
    common(ev, "--config");
    ev->add_option("--scores", scores_path, "Scores CSV")->required();
    ev->add_option("--sps", sps_path, "SPS CSV for the SPS-AUROC correlation");
    ev->add_option("--data", data_path, "Dataset JSONL for split flags and the excluded count");
    ev->add_option("--out", out_path, "Report JSON path")->required();
    ev->add_option("--risk-out", risk_path, "Risk-coverage CSV (default: risk_coverage.csv beside --out)");

    std::string out_dir;
    auto* pl = app.add_subcommand("pipeline", "gen-data, train, sps, score and eval into one directory");
    common(pl, "--config");
    pl->add_option("--out-dir", out_dir, "Output directory")->required();
    pl->add_option("--threads", threads, "Scoring worker threads");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // CLI11 routes help to `out` and errors to `err`.
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kValidation;
    }

    auto beside = [](const std::string& anchor, const char* name) {
        return (fs::path(anchor).parent_path() / name).string();
    };

    try {
        if (!config_path.empty()) apply_config_file(cfg, config_path);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got \"" + kv + "\"");
            apply_setting(cfg, trim(kv.substr(0, eq)), kv.substr(eq + 1));
        }
        if (seed) cfg.seed = *seed;
        if (max_offset) cfg.max_offset = *max_offset;
        if (!methods.empty()) cfg.uq.methods = parse_list(methods);
        if (tau) cfg.uq.tau = *tau;
        if (beta) cfg.uq.beta = *beta;
        if (temperature) cfg.uq.temperature = *temperature;
        if (mc_samples) cfg.uq.mc_samples = *mc_samples;
        if (threads) cfg.threads = *threads;
        if (max_new) cfg.uq.max_new = *max_new;
        if (!norm.empty()) apply_setting(cfg, "norm", norm);
        if (no_entropy_weights) cfg.uq.entropy_weights = false;

        if (*gen) {
            gen_data(cfg, out_path, out);
        } else if (*trn) {
            train_model(cfg, data_path, ckpt_path, loss_path.empty() ? beside(ckpt_path, "loss.csv") : loss_path, out);
        } else if (*sp) {
            run_sps(cfg, ckpt_path, data_path, out_path,
                    selection_path.empty() ? beside(out_path, "selection.json") : selection_path, out);
        } else if (*sc) {
            run_score(cfg, ckpt_path, data_path, selection_path, out_path, out, err);
        } else if (*ev) {
            run_eval(cfg, scores_path, sps_path, data_path, out_path,
                     risk_path.empty() ? beside(out_path, "risk_coverage.csv") : risk_path, out);
        } else if (*pl) {
            run_pipeline(cfg, out_dir, out, err);
        }
    } catch (const train::NumericalError& e) {
        err << "error: " << e.what() << '\n';
        return kNumerical;
    } catch (const eval::DegenerateLabelsError& e) {
        err << "error: " << e.what() << '\n';
        return kDegenerate;
    } catch (const std::exception& e) {
        // Validation, parse and I/O failures.
        err << "error: " << e.what() << '\n';
        return kValidation;
    }
    return kOk;
}

}  // namespace sglab::cli
