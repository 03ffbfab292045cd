#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mcl/checkpoint.hpp"
#include "mcl/cli.hpp"
#include "mcl/episode.hpp"
#include "mcl/model.hpp"
#include "mcl/rng.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

CliResult run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    CliResult r;
    r.code = mcl::run_cli(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

struct DirGuard {
    fs::path path;
    explicit DirGuard(fs::path p) : path(std::move(p)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~DirGuard() { fs::remove_all(path); }
    std::string str(const std::string& sub) const { return (path / sub).string(); }
};

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream f(p);
    REQUIRE(f.good());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) lines.push_back(line);
    return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    return fields;
}

std::uint32_t read_u32(const std::vector<std::uint8_t>& b, std::size_t at) {
    return std::uint32_t(b[at]) | std::uint32_t(b[at + 1]) << 8 |
           std::uint32_t(b[at + 2]) << 16 | std::uint32_t(b[at + 3]) << 24;
}

// Shared tiny-model flags so train-based tests stay fast.
std::vector<std::string> tiny_model_flags() {
    return {"--layers", "2",  "--hidden", "12", "--head-dim", "5",
            "--state-size", "4",  "--conv-width", "3", "--performer-features", "5",
            "--input-dim", "6",  "--ffn-hidden", "14", "--vocab", "9"};
}

std::vector<std::string> with_tiny(std::vector<std::string> args) {
    auto extra = tiny_model_flags();
    args.insert(args.end(), extra.begin(), extra.end());
    return args;
}

void make_pool_file(const std::string& path, const std::string& classes = "6",
                    const std::string& items = "4", const std::string& dim = "6") {
    CliResult r = run({"gen-pool", "--classes", classes, "--items", items, "--dim", dim,
                       "--std", "0.1", "--seed", "5", "--out", path});
    REQUIRE(r.code == 0);
}

} // namespace

TEST_CASE("gen-pool writes a header-correct, loadable pool") {
    DirGuard dir("cli_genpool_tmp");
    std::string pool_path = dir.str("pool.bin");
    CliResult r = run({"gen-pool", "--classes", "64", "--items", "20", "--dim", "16",
                       "--seed", "3", "--out", pool_path});
    REQUIRE(r.code == 0);

    auto bytes = file_bytes(pool_path);
    REQUIRE(bytes.size() > 20);
    REQUIRE(std::string(bytes.begin(), bytes.begin() + 8) == "MCLPOOL1");
    CHECK(read_u32(bytes, 8) == 1280);  // 64 classes x 20 items
    CHECK(read_u32(bytes, 12) == 16);
    CHECK(read_u32(bytes, 16) == 64);

    mcl::SamplePool pool = mcl::load_embedding_pool(pool_path);
    CHECK(pool.items.size() == 1280);
    CHECK(pool.dim() == 16);

    // the effective config is echoed beside the pool file
    auto lines = read_lines(dir.path / "resolved.cfg");
    bool saw_classes = false;
    for (const auto& l : lines)
        if (l == "classes = 64") saw_classes = true;
    CHECK(saw_classes);
}

TEST_CASE("gen-pool is deterministic in the seed") {
    DirGuard dir("cli_genpool_det_tmp");
    run({"gen-pool", "--seed", "9", "--classes", "5", "--items", "3", "--dim", "4",
         "--out", dir.str("a.bin")});
    run({"gen-pool", "--seed", "9", "--classes", "5", "--items", "3", "--dim", "4",
         "--out", dir.str("b.bin")});
    run({"gen-pool", "--seed", "10", "--classes", "5", "--items", "3", "--dim", "4",
         "--out", dir.str("c.bin")});
    CHECK(file_bytes(dir.str("a.bin")) == file_bytes(dir.str("b.bin")));
    CHECK(file_bytes(dir.str("a.bin")) != file_bytes(dir.str("c.bin")));
}

TEST_CASE("gen-pool rejects an unwritable output path") {
    DirGuard dir("cli_genpool_bad_tmp");
    std::ofstream(dir.str("blocker")) << "x";
    CliResult r = run({"gen-pool", "--out", dir.str("blocker") + "/pool.bin"});
    CHECK(r.code == 1);
    CHECK_FALSE(r.err.empty());
}

TEST_CASE("train completes and writes metrics plus a final checkpoint") {
    DirGuard dir("cli_train_tmp");
    make_pool_file(dir.str("pool.bin"));
    CliResult r = run(with_tiny({"train", "--family", "mamba", "--pool", dir.str("pool.bin"),
                                 "--tasks", "3", "--shots", "1", "--steps", "3", "--batch", "2",
                                 "--lr", "0.001", "--out", dir.str("run")}));
    REQUIRE(r.code == 0);
    CHECK(fs::exists(dir.path / "run" / "ckpt-final.bin"));
    CHECK(fs::exists(dir.path / "run" / "resolved.cfg"));

    auto lines = read_lines(dir.path / "run" / "metrics.csv");
    REQUIRE(lines.size() == 4); // header + 3 steps
    CHECK(lines[0] == "step,lr,task_loss,slct_loss,combined_loss");
    auto last = split_csv(lines[3]);
    REQUIRE(last.size() == 5);
    CHECK(last[0] == "2");
    CHECK(std::isfinite(std::stod(last[2])));
}

TEST_CASE("train --steps 0 writes an init-only checkpoint") {
    DirGuard dir("cli_train0_tmp");
    make_pool_file(dir.str("pool.bin"));
    CliResult r = run(with_tiny({"train", "--family", "linear_tf", "--pool", dir.str("pool.bin"),
                                 "--tasks", "3", "--shots", "1", "--steps", "0", "--seed", "7",
                                 "--out", dir.str("run")}));
    REQUIRE(r.code == 0);

    mcl::Model got = mcl::load_model(dir.str("run") + "/ckpt-final.bin");
    mcl::ModelConfig mc;
    mc.family = mcl::Family::linear_tf;
    mc.num_layers = 2;
    mc.hidden_dim = 12;
    mc.head_dim = 5;
    mc.ssm_state_size = 4;
    mc.conv_width = 3;
    mc.num_performer_features = 5;
    mc.input_dim = 6;
    mc.ffn_hidden = 14;
    mc.vocab_size = 9;
    mcl::Model want = mcl::init_model(mc, mcl::Rng(7).fork(0).seed());
    REQUIRE(got.params.size() == want.params.size());
    for (std::size_t i = 0; i < got.params.size(); ++i) {
        CHECK(got.params[i].first == want.params[i].first);
        CHECK(got.params[i].second.data() == want.params[i].second.data());
    }
    auto lines = read_lines(dir.path / "run" / "metrics.csv");
    CHECK(lines.size() == 1); // header only
}

TEST_CASE("train with lambda 0 still reports the selectivity column") {
    DirGuard dir("cli_lambda0_tmp");
    make_pool_file(dir.str("pool.bin"));
    CliResult r = run(with_tiny({"train", "--family", "mamba", "--pool", dir.str("pool.bin"),
                                 "--tasks", "3", "--shots", "1", "--steps", "2", "--batch", "2",
                                 "--lambda", "0", "--out", dir.str("run")}));
    REQUIRE(r.code == 0);
    auto lines = read_lines(dir.path / "run" / "metrics.csv");
    REQUIRE(lines.size() == 3);
    for (std::size_t i = 1; i < lines.size(); ++i) {
        auto f = split_csv(lines[i]);
        REQUIRE(f.size() == 5);
        double task = std::stod(f[2]);
        double slct = std::stod(f[3]);
        double combined = std::stod(f[4]);
        CHECK(slct > 0.0); // computed even though unweighted
        CHECK(combined == task);
    }
}

TEST_CASE("invalid family is a usage error that lists the choices") {
    CliResult r = run({"train", "--family", "bogus"});
    CHECK(r.code == 2);
    CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring(
                          "transformer, linear_tf, performer, mamba"));
}

TEST_CASE("unknown flags and config keys are rejected by name") {
    CliResult flag = run({"train", "--wibble", "3"});
    CHECK(flag.code == 2);
    CHECK_THAT(flag.err, Catch::Matchers::ContainsSubstring("--wibble"));

    DirGuard dir("cli_unknown_tmp");
    std::ofstream(dir.str("bad.cfg")) << "steps = 5\nbogus-knob = 1\n";
    CliResult key = run({"train", "--config", dir.str("bad.cfg")});
    CHECK(key.code == 2);
    CHECK_THAT(key.err, Catch::Matchers::ContainsSubstring("bogus-knob"));
}

TEST_CASE("config layering is defaults, then file, then flags") {
    DirGuard dir("cli_layering_tmp");
    make_pool_file(dir.str("pool.bin"));
    std::ofstream(dir.str("run.cfg")) << "# toy settings\n"
                                      << "lambda = 0.25\n"
                                      << "tasks = 7\n"
                                      << "pool = " << dir.str("pool.bin") << "\n";
    CliResult r = run(with_tiny({"train", "--config", dir.str("run.cfg"), "--tasks", "3",
                                 "--shots", "1", "--steps", "0", "--out", dir.str("run")}));
    REQUIRE(r.code == 0);

    std::string lambda, tasks, shots;
    for (const auto& l : read_lines(dir.path / "run" / "resolved.cfg")) {
        if (l.rfind("lambda = ", 0) == 0) lambda = l;
        if (l.rfind("tasks = ", 0) == 0) tasks = l;
        if (l.rfind("shots = ", 0) == 0) shots = l;
    }
    CHECK(lambda == "lambda = 0.25"); // from file
    CHECK(tasks == "tasks = 3");      // flag beats file
    CHECK(shots == "shots = 1");      // flag beats default
}

TEST_CASE("resolved.cfg plus inputs reproduces a training run exactly") {
    DirGuard dir("cli_repro_tmp");
    make_pool_file(dir.str("pool.bin"));
    CliResult first =
        run(with_tiny({"train", "--family", "mamba", "--pool", dir.str("pool.bin"), "--tasks",
                       "3", "--shots", "1", "--steps", "2", "--batch", "2", "--seed", "11",
                       "--lr", "0.001", "--out", dir.str("run1")}));
    REQUIRE(first.code == 0);
    CliResult second = run({"train", "--config", dir.str("run1") + "/resolved.cfg", "--out",
                            dir.str("run2")});
    REQUIRE(second.code == 0);
    CHECK(file_bytes(dir.path / "run1" / "ckpt-final.bin") ==
          file_bytes(dir.path / "run2" / "ckpt-final.bin"));
    CHECK(file_bytes(dir.path / "run1" / "metrics.csv") ==
          file_bytes(dir.path / "run2" / "metrics.csv"));
}

TEST_CASE("eval on an untrained checkpoint sits at chance level") {
    DirGuard dir("cli_chance_tmp");
    make_pool_file(dir.str("pool.bin"), "25", "2", "6");
    CliResult tr = run({"train", "--family", "mamba", "--pool", dir.str("pool.bin"), "--steps",
                        "0", "--layers", "2", "--hidden", "12", "--head-dim", "5",
                        "--state-size", "4", "--conv-width", "3", "--input-dim", "6",
                        "--vocab", "200", "--out", dir.str("run")});
    REQUIRE(tr.code == 0);
    CliResult ev = run({"eval", "--checkpoint", dir.str("run") + "/ckpt-final.bin", "--pool",
                        dir.str("pool.bin"), "--tasks", "20", "--shots", "1", "--episodes",
                        "25", "--seed", "2024", "--out", dir.str("run")});
    REQUIRE(ev.code == 0);

    auto lines = read_lines(dir.path / "run" / "eval" / "report.csv");
    REQUIRE(lines.size() == 2);
    CHECK(lines[0] == "setting,K,S,sigma,episodes,metric_mean,metric_std");
    auto f = split_csv(lines[1]);
    REQUIRE(f.size() == 7);
    CHECK(f[0] == "mamba:classification");
    double acc = std::stod(f[5]);
    double p = 1.0 / 200.0;
    double sigma3 = 3.0 * std::sqrt(p * (1.0 - p) / 500.0); // 25 episodes x 20 queries
    CHECK(std::abs(acc - p) <= sigma3);
}

TEST_CASE("sweep writes one row per value") {
    DirGuard dir("cli_sweep_tmp");
    make_pool_file(dir.str("pool.bin"), "40", "4", "6");
    CliResult tr = run({"train", "--family", "mamba", "--pool", dir.str("pool.bin"), "--steps",
                        "0", "--layers", "2", "--hidden", "12", "--head-dim", "5",
                        "--state-size", "4", "--conv-width", "3", "--input-dim", "6",
                        "--vocab", "64", "--out", dir.str("run")});
    REQUIRE(tr.code == 0);
    std::string ckpt = dir.str("run") + "/ckpt-final.bin";

    CliResult ks = run({"sweep", "--checkpoint", ckpt, "--pool", dir.str("pool.bin"), "--axis",
                        "tasks", "--values", "5,10,20,40", "--shots", "1", "--episodes", "2",
                        "--out", dir.str("run")});
    REQUIRE(ks.code == 0);
    CHECK(read_lines(dir.path / "run" / "eval" / "sweep-tasks.csv").size() == 5);

    CliResult ns = run({"sweep", "--checkpoint", ckpt, "--pool", dir.str("pool.bin"), "--axis",
                        "noise", "--values", "0,1,2,4,6,8,10", "--tasks", "3", "--shots", "2",
                        "--episodes", "2", "--out", dir.str("run")});
    REQUIRE(ns.code == 0);
    auto lines = read_lines(dir.path / "run" / "eval" / "sweep-noise.csv");
    REQUIRE(lines.size() == 8);
    CHECK(split_csv(lines[1])[3] == "0");
    CHECK(split_csv(lines[7])[3] == "10");
}

TEST_CASE("checkpoint and family flag must agree") {
    DirGuard dir("cli_mismatch_tmp");
    make_pool_file(dir.str("pool.bin"));
    CliResult tr = run(with_tiny({"train", "--family", "mamba", "--pool", dir.str("pool.bin"),
                                  "--steps", "0", "--out", dir.str("run")}));
    REQUIRE(tr.code == 0);
    CliResult ev = run({"eval", "--checkpoint", dir.str("run") + "/ckpt-final.bin", "--family",
                        "transformer", "--pool", dir.str("pool.bin"), "--tasks", "3", "--shots",
                        "1", "--episodes", "1", "--out", dir.str("run2")});
    CHECK(ev.code == 1);
    CHECK_THAT(ev.err, Catch::Matchers::ContainsSubstring("mamba"));
    CHECK_THAT(ev.err, Catch::Matchers::ContainsSubstring("transformer"));
    CHECK_FALSE(fs::exists(dir.path / "run2"));
}

TEST_CASE("usage errors never leave partial output") {
    DirGuard dir("cli_clean_tmp");
    CliResult bad_family = run({"train", "--family", "bogus", "--out", dir.str("run")});
    CHECK(bad_family.code == 2);
    CHECK_FALSE(fs::exists(dir.path / "run"));

    make_pool_file(dir.str("pool.bin"));
    CliResult bad_eval = run({"eval", "--checkpoint", dir.str("missing.bin"), "--pool",
                              dir.str("pool.bin"), "--episodes", "0", "--out", dir.str("run")});
    CHECK(bad_eval.code == 2);
    CHECK_FALSE(fs::exists(dir.path / "run"));
}

TEST_CASE("training divergence exits nonzero with a diagnostic") {
    DirGuard dir("cli_diverge_tmp");
    make_pool_file(dir.str("pool.bin"));
    CliResult r = run(with_tiny({"train", "--family", "mamba", "--pool", dir.str("pool.bin"),
                                 "--tasks", "3", "--shots", "1", "--steps", "3", "--batch", "1",
                                 "--lr", "1e300", "--out", dir.str("run")}));
    CHECK(r.code == 1);
    CHECK_FALSE(r.err.empty()); // blown-up parameters abort with a diagnostic
}

TEST_CASE("sine training needs no pool file") {
    DirGuard dir("cli_sine_tmp");
    CliResult r = run({"train", "--family", "linear_tf", "--kind", "sine", "--tasks", "2",
                       "--shots", "2", "--steps", "1", "--batch", "1", "--layers", "1",
                       "--hidden", "12", "--head-dim", "5", "--input-dim",
                       std::to_string(mcl::sine_points), "--target-dim",
                       std::to_string(mcl::sine_points), "--out", dir.str("run")});
    REQUIRE(r.code == 0);
    CHECK(fs::exists(dir.path / "run" / "ckpt-final.bin"));
}

TEST_CASE("export-assoc writes score and position files") {
    DirGuard dir("cli_assoc_tmp");
    make_pool_file(dir.str("pool.bin"));
    CliResult tr = run(with_tiny({"train", "--family", "transformer", "--pool",
                                  dir.str("pool.bin"), "--steps", "0", "--out",
                                  dir.str("run")}));
    REQUIRE(tr.code == 0);
    CliResult ex = run({"export-assoc", "--checkpoint", dir.str("run") + "/ckpt-final.bin",
                        "--family", "transformer", "--pool", dir.str("pool.bin"), "--tasks",
                        "3", "--shots", "2", "--out", dir.str("run")});
    REQUIRE(ex.code == 0);
    auto rows = read_lines(dir.path / "run" / "assoc" / "assoc.csv");
    REQUIRE(rows.size() == 3); // one per query
    CHECK(split_csv(rows[0]).size() == 12); // 2 * (3 tasks * 2 shots)
    auto pos = read_lines(dir.path / "run" / "assoc" / "assoc_positions.csv");
    CHECK(pos.size() == 13); // header + 12 context positions
    CHECK(pos[0] == "position,task,shot,kind");
}

TEST_CASE("help and command errors use the right exit codes") {
    CliResult help = run({"--help"});
    CHECK(help.code == 0);
    CHECK_THAT(help.out, Catch::Matchers::ContainsSubstring("gen-pool"));

    CliResult none = run({});
    CHECK(none.code == 2);

    CliResult unknown = run({"frobnicate"});
    CHECK(unknown.code == 2);
    CHECK_THAT(unknown.err, Catch::Matchers::ContainsSubstring("frobnicate"));
}
