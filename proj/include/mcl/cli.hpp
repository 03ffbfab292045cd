#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcl/episode.hpp"
#include "mcl/error.hpp"
#include "mcl/eval.hpp"
#include "mcl/log.hpp"
#include "mcl/model.hpp"
#include "mcl/training.hpp"

namespace mcl {

struct CliConfig {
    std::string command;
    std::map<std::string, std::string> values; // effective config: defaults < file < flags
};

namespace detail_cli {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline const std::set<std::string>& known_keys(const std::string& command) {
    static const std::set<std::string> common = {
        "seed", "out", "family", "moe-experts", "discretization",
        "lambda", "tasks", "shots", "vocab", "threads"};
    static const std::map<std::string, std::set<std::string>> extra = {
        {"gen-pool", {"classes", "items", "dim", "std"}},
        {"train",
         {"pool", "kind", "steps", "batch", "lr", "lr-decay-rate", "lr-decay-step",
          "checkpoint-every", "clip", "resume", "layers", "hidden", "head-dim", "state-size",
          "conv-width", "performer-features", "input-dim", "target-dim", "ffn-hidden",
          "max-positions"}},
        {"eval", {"checkpoint", "pool", "kind", "episodes", "sigma", "noise-count"}},
        {"sweep",
         {"checkpoint", "pool", "kind", "episodes", "sigma", "noise-count", "axis", "values"}},
        {"export-assoc", {"checkpoint", "pool", "kind", "episode-index"}},
    };
    static std::map<std::string, std::set<std::string>> merged = [] {
        std::map<std::string, std::set<std::string>> m;
        for (const auto& [cmd, keys] : extra) {
            std::set<std::string> s = common;
            s.insert(keys.begin(), keys.end());
            m[cmd] = std::move(s);
        }
        return m;
    }();
    auto it = merged.find(command);
    if (it == merged.end()) throw usage_error("unknown command '" + command + "'");
    return it->second;
}

inline std::map<std::string, std::string> default_values(const std::string& command) {
    std::map<std::string, std::string> v = {
        {"seed", "0"},          {"out", "run"},    {"family", "mamba"},
        {"moe-experts", "0"},   {"discretization", "zoh"},
        {"lambda", "0.5"},      {"tasks", "5"},    {"shots", "2"},
        {"vocab", "200"},       {"threads", "1"},
    };
    if (command == "gen-pool") {
        v["out"] = "pool.bin";
        v["classes"] = "64";
        v["items"] = "20";
        v["dim"] = "16";
        v["std"] = "0.1";
    } else if (command == "train") {
        v["pool"] = "";
        v["kind"] = "classification";
        v["steps"] = "50000";
        v["batch"] = "16";
        v["lr"] = "0.0001";
        v["lr-decay-rate"] = "0.5";
        v["lr-decay-step"] = "10000";
        v["checkpoint-every"] = "0";
        v["clip"] = "auto";
        v["resume"] = "";
        v["layers"] = "4";
        v["hidden"] = "512";
        v["head-dim"] = "64";
        v["state-size"] = "128";
        v["conv-width"] = "4";
        v["performer-features"] = "64";
        v["input-dim"] = "16";
        v["target-dim"] = "0";
        v["ffn-hidden"] = "0";
        v["max-positions"] = "4096";
    } else if (command == "eval" || command == "sweep") {
        v["checkpoint"] = "";
        v["pool"] = "";
        v["kind"] = "classification";
        v["episodes"] = "200";
        v["sigma"] = "0";
        v["noise-count"] = "5";
        if (command == "sweep") {
            v["axis"] = "tasks";
            v["values"] = "";
        }
    } else if (command == "export-assoc") {
        v["checkpoint"] = "";
        v["pool"] = "";
        v["kind"] = "classification";
        v["episode-index"] = "0";
    }
    return v;
}

inline void apply_config_file(CliConfig& cfg, const std::string& path,
                              const std::set<std::string>& known) {
    std::ifstream f(path);
    if (!f) throw usage_error("cannot read config file '" + path + "'");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw usage_error(path + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key == "config")
            throw usage_error(path + ":" + std::to_string(lineno) +
                              ": 'config' cannot be set from a config file");
        if (!known.count(key))
            throw usage_error(path + ":" + std::to_string(lineno) + ": unknown key '" + key +
                              "' for command '" + cfg.command + "'");
        cfg.values[key] = value;
    }
}

} // namespace detail_cli

// Layers the effective configuration: built-in defaults, then the --config
// file if given, then the remaining flags in order.
inline CliConfig parse_cli(const std::string& command, const std::vector<std::string>& args) {
    CliConfig cfg;
    cfg.command = command;
    const auto& known = detail_cli::known_keys(command);
    cfg.values = detail_cli::default_values(command);

    // flags are --key value or --key=value; collect them before applying so
    // the config file can be layered underneath
    std::vector<std::pair<std::string, std::string>> flags;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const std::string& a = args[i];
        if (a.rfind("--", 0) != 0)
            throw usage_error("expected a --flag, got '" + a + "'");
        std::string key, value;
        std::size_t eq = a.find('=');
        if (eq != std::string::npos) {
            key = a.substr(2, eq - 2);
            value = a.substr(eq + 1);
        } else {
            key = a.substr(2);
            if (i + 1 >= args.size())
                throw usage_error("flag --" + key + " needs a value");
            value = args[++i];
        }
        if (key != "config" && !known.count(key))
            throw usage_error("unknown flag --" + key + " for command '" + command + "'");
        flags.emplace_back(key, value);
    }
    for (const auto& [key, value] : flags)
        if (key == "config") detail_cli::apply_config_file(cfg, value, known);
    for (const auto& [key, value] : flags)
        if (key != "config") cfg.values[key] = value;
    return cfg;
}

namespace detail_cli {

inline const std::string& get(const CliConfig& cfg, const std::string& key) {
    auto it = cfg.values.find(key);
    if (it == cfg.values.end())
        throw contract_error("cli: key '" + key + "' missing from defaults");
    return it->second;
}

inline std::uint64_t get_u64(const CliConfig& cfg, const std::string& key) {
    const std::string& s = get(cfg, key);
    if (s.empty() || s[0] == '-')
        throw usage_error("--" + key + " expects a non-negative integer, got '" + s + "'");
    try {
        std::size_t used = 0;
        std::uint64_t v = std::stoull(s, &used);
        if (used != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw usage_error("--" + key + " expects a non-negative integer, got '" + s + "'");
    }
}

inline double get_double(const CliConfig& cfg, const std::string& key) {
    const std::string& s = get(cfg, key);
    try {
        std::size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw usage_error("--" + key + " expects a number, got '" + s + "'");
    }
}

inline Family get_family(const CliConfig& cfg) {
    const std::string& s = get(cfg, "family");
    try {
        return parse_family(s);
    } catch (const std::exception&) {
        throw usage_error("invalid family '" + s +
                          "'; valid families: transformer, linear_tf, performer, mamba");
    }
}

inline Discretization get_discretization(const CliConfig& cfg) {
    const std::string& s = get(cfg, "discretization");
    try {
        return parse_discretization(s);
    } catch (const std::exception&) {
        throw usage_error("invalid discretization '" + s +
                          "'; valid schemes: zoh, paper_literal, euler");
    }
}

inline EpisodeKind get_kind(const CliConfig& cfg) {
    const std::string& s = get(cfg, "kind");
    if (s == "classification") return EpisodeKind::classification;
    if (s == "sine") return EpisodeKind::sine;
    if (s == "rotation") return EpisodeKind::rotation;
    if (s == "completion") return EpisodeKind::completion;
    throw usage_error("invalid kind '" + s +
                      "'; valid kinds: classification, sine, rotation, completion");
}

inline ClipMode get_clip(const CliConfig& cfg) {
    const std::string& s = get(cfg, "clip");
    if (s == "auto") return ClipMode::automatic;
    if (s == "on") return ClipMode::on;
    if (s == "off") return ClipMode::off;
    throw usage_error("invalid clip mode '" + s + "'; valid modes: auto, on, off");
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    return out;
}

inline ModelConfig model_config_from_cli(const CliConfig& cfg) {
    ModelConfig m;
    m.family = get_family(cfg);
    m.num_layers = get_u64(cfg, "layers");
    m.hidden_dim = get_u64(cfg, "hidden");
    m.head_dim = get_u64(cfg, "head-dim");
    m.ssm_state_size = get_u64(cfg, "state-size");
    m.conv_width = get_u64(cfg, "conv-width");
    m.vocab_size = get_u64(cfg, "vocab");
    m.num_performer_features = get_u64(cfg, "performer-features");
    m.input_dim = get_u64(cfg, "input-dim");
    m.target_dim = get_u64(cfg, "target-dim");
    m.ffn_hidden = get_u64(cfg, "ffn-hidden");
    m.max_positions = get_u64(cfg, "max-positions");
    m.discretization = get_discretization(cfg);
    m.moe.num_experts = get_u64(cfg, "moe-experts");
    return m;
}

inline TrainConfig train_config_from_cli(const CliConfig& cfg) {
    TrainConfig t;
    t.model = model_config_from_cli(cfg);
    t.batch_size = get_u64(cfg, "batch");
    t.max_steps = get_u64(cfg, "steps");
    t.base_lr = get_double(cfg, "lr");
    t.lr_decay_rate = get_double(cfg, "lr-decay-rate");
    t.lr_decay_step = get_u64(cfg, "lr-decay-step");
    t.lambda_slct = get_double(cfg, "lambda");
    t.seed = get_u64(cfg, "seed");
    t.checkpoint_every = get_u64(cfg, "checkpoint-every");
    t.threads = get_u64(cfg, "threads");
    t.clip = get_clip(cfg);
    t.episode.kind = get_kind(cfg);
    t.episode.tasks = get_u64(cfg, "tasks");
    t.episode.shots = get_u64(cfg, "shots");
    return t;
}

inline void write_resolved(const CliConfig& cfg, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::filesystem::path p = dir / "resolved.cfg";
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw io_error("cannot open '" + p.string() + "' for writing");
    for (const auto& [k, v] : cfg.values) f << k << " = " << v << "\n";
    if (!f) throw io_error("write failed for '" + p.string() + "'");
}

// usage-stage checks, separated from the actual loads so every flag problem
// is reported before any file is opened or written
inline void require_pool_flag(const CliConfig& cfg, EpisodeKind kind) {
    if (kind == EpisodeKind::sine) return;
    if (get(cfg, "pool").empty())
        throw usage_error(cfg.command + ": --pool is required for " +
                          std::string(episode_kind_name(kind)) + " episodes");
}

inline void require_checkpoint_flag(const CliConfig& cfg) {
    if (get(cfg, "checkpoint").empty())
        throw usage_error(cfg.command + ": --checkpoint is required");
}

// The evaluation commands take the model shape from the checkpoint itself;
// --family is a cross-check against using the wrong artifact.
inline Model load_checkpoint_model(const CliConfig& cfg) {
    require_checkpoint_flag(cfg);
    const std::string& path = get(cfg, "checkpoint");
    Model m = load_model(path);
    Family want = get_family(cfg);
    if (m.cfg.family != want)
        throw data_error("checkpoint '" + path + "' holds family " +
                         family_name(m.cfg.family) + ", flags request " + family_name(want));
    return m;
}

struct LoadedPool {
    SamplePool pool;
    bool present = false;
};

inline LoadedPool load_pool_if_needed(const CliConfig& cfg, EpisodeKind kind, Split split) {
    LoadedPool lp;
    if (kind == EpisodeKind::sine) return lp;
    require_pool_flag(cfg, kind);
    lp.pool = load_embedding_pool(get(cfg, "pool"), split);
    lp.present = true;
    return lp;
}

inline int cmd_gen_pool(const CliConfig& cfg, std::ostream& out) {
    std::uint64_t classes = get_u64(cfg, "classes");
    std::uint64_t items = get_u64(cfg, "items");
    std::uint64_t dim = get_u64(cfg, "dim");
    double std_dev = get_double(cfg, "std");
    std::uint64_t seed = get_u64(cfg, "seed");
    if (classes == 0 || items == 0 || dim == 0)
        throw usage_error("gen-pool: --classes, --items, and --dim must be positive");
    if (std_dev < 0) throw usage_error("gen-pool: --std must be non-negative");

    std::filesystem::path out_file = get(cfg, "out");
    if (out_file.has_parent_path()) std::filesystem::create_directories(out_file.parent_path());
    write_resolved(cfg, out_file.has_parent_path() ? out_file.parent_path()
                                                   : std::filesystem::path("."));
    Rng rng(seed);
    SamplePool pool = make_synthetic_pool(classes, items, dim, std_dev, rng);
    write_embedding_pool(out_file.string(), pool);
    out << "wrote " << out_file.string() << " (" << pool.items.size() << " items, dim " << dim
        << ", " << classes << " classes)\n";
    return 0;
}

inline int cmd_train(const CliConfig& cfg, std::ostream& out) {
    TrainConfig tcfg = train_config_from_cli(cfg);
    try {
        tcfg.validate();
    } catch (const config_error& e) {
        throw usage_error(std::string("train: ") + e.what());
    }
    LoadedPool lp = load_pool_if_needed(cfg, tcfg.episode.kind, Split::meta_train);
    const SamplePool* pool = lp.present ? &lp.pool : nullptr;

    std::filesystem::path dir = get(cfg, "out");
    write_resolved(cfg, dir);
    std::size_t report_every = tcfg.max_steps > 10 ? tcfg.max_steps / 10 : 1;
    TrainHooks hooks;
    hooks.on_step = [&](const StepLog& l) {
        if (l.step % report_every == 0 || l.step + 1 == tcfg.max_steps)
            log_info("step " + std::to_string(l.step) + " task " + std::to_string(l.task_loss) +
                     " slct " + std::to_string(l.slct_loss));
    };

    const std::string& resume = get(cfg, "resume");
    TrainState ts = resume.empty()
                        ? meta_train(tcfg, pool, dir.string(), hooks)
                        : resume_training(resume, tcfg, pool, dir.string(), hooks);
    out << "trained to step " << ts.step << ", wrote " << (dir / "ckpt-final.bin").string()
        << "\n";
    return 0;
}

inline int cmd_eval(const CliConfig& cfg, std::ostream& out) {
    EpisodeKind kind = get_kind(cfg);
    std::uint64_t episodes = get_u64(cfg, "episodes");
    if (episodes == 0) throw usage_error("eval: --episodes must be positive");
    std::uint64_t tasks = get_u64(cfg, "tasks");
    std::uint64_t shots = get_u64(cfg, "shots");
    std::uint64_t seed = get_u64(cfg, "seed");
    double sigma = get_double(cfg, "sigma");
    std::uint64_t noise_count = get_u64(cfg, "noise-count");
    require_checkpoint_flag(cfg);
    require_pool_flag(cfg, kind);

    Model m = load_checkpoint_model(cfg);
    LoadedPool lp = load_pool_if_needed(cfg, kind, Split::meta_test);
    const SamplePool* pool = lp.present ? &lp.pool : nullptr;

    std::filesystem::path dir = get(cfg, "out");
    write_resolved(cfg, dir);
    std::filesystem::create_directories(dir / "eval");
    EvalReport rep = meta_test(m, pool, kind, tasks, shots, episodes, seed, sigma, noise_count);
    std::filesystem::path csv = dir / "eval" / "report.csv";
    write_eval_csv(csv.string(), {rep});
    out << "evaluated " << rep.num_episodes << " episodes, "
        << (rep.classification ? "accuracy " : "error ") << rep.metric_mean << ", wrote "
        << csv.string() << "\n";
    return 0;
}

inline int cmd_sweep(const CliConfig& cfg, std::ostream& out) {
    EpisodeKind kind = get_kind(cfg);
    std::uint64_t episodes = get_u64(cfg, "episodes");
    if (episodes == 0) throw usage_error("sweep: --episodes must be positive");
    const std::string& axis = get(cfg, "axis");
    if (axis != "tasks" && axis != "shots" && axis != "noise")
        throw usage_error("invalid axis '" + axis + "'; valid axes: tasks, shots, noise");
    std::vector<std::string> raw = split_list(get(cfg, "values"));
    if (raw.empty()) throw usage_error("sweep: --values is required (comma-separated list)");
    std::vector<std::size_t> ints;
    std::vector<double> doubles;
    for (const std::string& s : raw) {
        CliConfig one = cfg;
        one.values["values"] = s;
        if (axis == "noise")
            doubles.push_back(get_double(one, "values"));
        else
            ints.push_back(get_u64(one, "values"));
    }
    std::uint64_t tasks = get_u64(cfg, "tasks");
    std::uint64_t shots = get_u64(cfg, "shots");
    std::uint64_t seed = get_u64(cfg, "seed");
    std::uint64_t noise_count = get_u64(cfg, "noise-count");
    require_checkpoint_flag(cfg);
    require_pool_flag(cfg, kind);

    Model m = load_checkpoint_model(cfg);
    LoadedPool lp = load_pool_if_needed(cfg, kind, Split::meta_test);
    const SamplePool* pool = lp.present ? &lp.pool : nullptr;

    std::filesystem::path dir = get(cfg, "out");
    write_resolved(cfg, dir);
    std::filesystem::create_directories(dir / "eval");
    std::vector<EvalReport> reports;
    if (axis == "tasks")
        reports = sweep_tasks(m, pool, kind, ints, shots, episodes, seed);
    else if (axis == "shots")
        reports = sweep_shots(m, pool, kind, ints, tasks, episodes, seed);
    else
        reports = sweep_noise(m, pool, kind, doubles, tasks, shots, episodes, seed, noise_count);
    std::filesystem::path csv = dir / "eval" / ("sweep-" + axis + ".csv");
    write_eval_csv(csv.string(), reports);
    out << "swept " << axis << " over " << reports.size() << " settings, wrote " << csv.string()
        << "\n";
    return 0;
}

inline int cmd_export_assoc(const CliConfig& cfg, std::ostream& out) {
    EpisodeKind kind = get_kind(cfg);
    std::uint64_t tasks = get_u64(cfg, "tasks");
    std::uint64_t shots = get_u64(cfg, "shots");
    std::uint64_t seed = get_u64(cfg, "seed");
    std::uint64_t episode_index = get_u64(cfg, "episode-index");
    require_checkpoint_flag(cfg);
    require_pool_flag(cfg, kind);

    Model m = load_checkpoint_model(cfg);
    LoadedPool lp = load_pool_if_needed(cfg, kind, Split::meta_test);
    const SamplePool* pool = lp.present ? &lp.pool : nullptr;

    std::filesystem::path dir = get(cfg, "out");
    write_resolved(cfg, dir);
    std::filesystem::create_directories(dir / "assoc");
    Rng rng = eval_episode_rng(seed, episode_index);
    Episode ep = make_episode(kind, pool, tasks, shots, 1, m.cfg.vocab_size, rng);
    std::filesystem::path csv = dir / "assoc" / "assoc.csv";
    export_association_matrix(m, ep, csv.string());
    out << "exported " << ep.tests.size() << " query rows to " << csv.string() << "\n";
    return 0;
}

inline const char* usage_text() {
    return "usage: mcl <command> [--flags]\n"
           "\n"
           "commands:\n"
           "  gen-pool      write a synthetic embedding pool (--classes --items --dim --std)\n"
           "  train         meta-train a model (--family --pool --tasks --shots --steps)\n"
           "  eval          meta-test a checkpoint (--checkpoint --pool --episodes)\n"
           "  sweep         evaluate along an axis (--axis tasks|shots|noise --values a,b,c)\n"
           "  export-assoc  dump raw association scores for one episode (--checkpoint)\n"
           "\n"
           "common flags: --config PATH --seed U64 --out DIR\n"
           "  --family {transformer|linear_tf|performer|mamba} --moe-experts N\n"
           "  --discretization {zoh|paper_literal|euler} --lambda F --tasks K --shots S\n"
           "  --vocab V --threads N\n"
           "\n"
           "set MCL_LOG={error|info|debug} for verbosity; see resolved.cfg in the output\n"
           "directory for every effective value of a run\n";
}

} // namespace detail_cli

// Full command dispatch. Returns the process exit code: 0 success, 1 runtime
// failure (I/O, bad data, divergence), 2 usage error. Usage errors are raised
// before anything is written.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
    if (args.empty()) {
        err << detail_cli::usage_text();
        return 2;
    }
    if (args[0] == "--help" || args[0] == "-h") {
        out << detail_cli::usage_text();
        return 0;
    }
    try {
        CliConfig cfg = parse_cli(args[0], {args.begin() + 1, args.end()});
        if (cfg.command == "gen-pool") return detail_cli::cmd_gen_pool(cfg, out);
        if (cfg.command == "train") return detail_cli::cmd_train(cfg, out);
        if (cfg.command == "eval") return detail_cli::cmd_eval(cfg, out);
        if (cfg.command == "sweep") return detail_cli::cmd_sweep(cfg, out);
        if (cfg.command == "export-assoc") return detail_cli::cmd_export_assoc(cfg, out);
        throw usage_error("unknown command '" + cfg.command + "'");
    } catch (const usage_error& e) {
        err << "mcl: " << e.what() << "\n\n" << detail_cli::usage_text();
        return 2;
    } catch (const std::exception& e) {
        err << "mcl: " << e.what() << "\n";
        return 1;
    }
}

} // namespace mcl
