#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mcl/checkpoint.hpp"
#include "mcl/episode.hpp"
#include "mcl/eval.hpp"
#include "mcl/model.hpp"
#include "mcl/ops.hpp"
#include "mcl/rng.hpp"
#include "mcl/selectivity.hpp"

using namespace mcl;

namespace {

ModelConfig tiny_config(Family f) {
    ModelConfig c;
    c.family = f;
    c.num_layers = 2;
    c.hidden_dim = 12;
    c.head_dim = 5;
    c.ssm_state_size = 4;
    c.conv_width = 3;
    c.vocab_size = 9;
    c.num_performer_features = 5;
    c.input_dim = 6;
    c.ffn_hidden = 14;
    c.max_positions = 2100;
    return c;
}

SamplePool wide_pool(std::size_t classes, std::size_t items, std::uint64_t seed = 3) {
    Rng rng(seed);
    return make_synthetic_pool(classes, items, 6, 0.1, rng);
}

std::vector<std::string> read_lines(const std::string& p) {
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

std::vector<std::uint8_t> file_bytes(const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("untrained models score at chance over 500 queries") {
    ModelConfig mc = tiny_config(Family::mamba);
    mc.vocab_size = 200;
    Model m = init_model(mc, 77);
    SamplePool pool = wide_pool(25, 2);

    EvalReport rep = meta_test(m, &pool, EpisodeKind::classification, 20, 1, 25, 2024);
    REQUIRE(rep.total_queries == 500);
    double p = 1.0 / 200.0;
    double sigma3 = 3.0 * std::sqrt(p * (1.0 - p) / 500.0);
    REQUIRE(std::abs(rep.overall_accuracy() - p) <= sigma3);
    REQUIRE(rep.metric_mean >= 0.0);
    REQUIRE(rep.metric_mean <= 1.0);
}

TEST_CASE("streamed scoring matches the full-sequence forward pass") {
    for (Family f : {Family::mamba, Family::transformer}) {
        Model m = init_model(tiny_config(f), 5);
        SamplePool pool = wide_pool(8, 3);
        std::uint64_t seed = 91;
        EvalReport rep = meta_test(m, &pool, EpisodeKind::classification, 4, 2, 3, seed);

        for (std::size_t i = 0; i < rep.num_episodes; ++i) {
            Rng erng = eval_episode_rng(seed, i);
            Episode ep = make_episode(EpisodeKind::classification, &pool, 4, 2, 1,
                                      m.cfg.vocab_size, erng);
            std::size_t correct = 0;
            for (std::size_t qi = 0; qi < ep.tests.size(); ++qi) {
                SequenceLayout layout = assemble_sequence(ep, qi);
                Tensor logits = model_forward(m, layout.tokens);
                std::size_t last = layout.tokens.size() - 1;
                const auto& v = logits.data();
                std::size_t best = 0;
                for (std::size_t j = 1; j < m.cfg.vocab_size; ++j)
                    if (v[last * m.cfg.vocab_size + j] > v[last * m.cfg.vocab_size + best])
                        best = j;
                if (best == static_cast<std::size_t>(layout.labels[0])) correct += 1;
            }
            REQUIRE(rep.episodes[i].correct == correct);
            REQUIRE(rep.episodes[i].queries == 4);
        }
    }
}

TEST_CASE("evaluation is deterministic and never touches the weights") {
    Model m = init_model(tiny_config(Family::linear_tf), 13);
    SamplePool pool = wide_pool(8, 3);

    save_model("eval_before.bin", m);
    EvalReport a = meta_test(m, &pool, EpisodeKind::classification, 4, 2, 5, 7);
    EvalReport b = meta_test(m, &pool, EpisodeKind::classification, 4, 2, 5, 7);
    save_model("eval_after.bin", m);

    REQUIRE(a.metric_mean == b.metric_mean);
    REQUIRE(a.metric_std == b.metric_std);
    for (std::size_t i = 0; i < a.episodes.size(); ++i) {
        REQUIRE(a.episodes[i].metric == b.episodes[i].metric);
        REQUIRE(a.episodes[i].correct == b.episodes[i].correct);
    }
    REQUIRE(file_bytes("eval_before.bin") == file_bytes("eval_after.bin"));
    std::remove("eval_before.bin");
    std::remove("eval_after.bin");
}

TEST_CASE("task sweep produces one report per count and rejects oversized K") {
    Model m = init_model(tiny_config(Family::mamba), 2);
    SamplePool pool = wide_pool(12, 3);

    auto reports = sweep_tasks(m, &pool, EpisodeKind::classification, {2, 4, 8}, 2, 3, 11);
    REQUIRE(reports.size() == 3);
    REQUIRE(reports[0].setting.tasks == 2);
    REQUIRE(reports[1].setting.tasks == 4);
    REQUIRE(reports[2].setting.tasks == 8);
    for (const auto& r : reports) {
        REQUIRE(r.setting.shots == 2);
        REQUIRE(r.num_episodes == 3);
        REQUIRE(r.episodes.size() == 3);
    }

    REQUIRE_THROWS_AS(
        sweep_tasks(m, &pool, EpisodeKind::classification, {4, 12}, 2, 3, 11),
        config_error);
}

TEST_CASE("noise sweep is paired and sigma zero is the clean run") {
    Model m = init_model(tiny_config(Family::mamba), 4);
    SamplePool pool = wide_pool(8, 3);

    EvalReport plain = meta_test(m, &pool, EpisodeKind::classification, 3, 2, 4, 55);
    auto reports =
        sweep_noise(m, &pool, EpisodeKind::classification, {0.0, 1.0, 4.0}, 3, 2, 4, 55);
    REQUIRE(reports.size() == 3);
    REQUIRE(reports[0].setting.sigma == 0.0);
    REQUIRE(reports[0].metric_mean == plain.metric_mean);
    for (std::size_t i = 0; i < plain.episodes.size(); ++i)
        REQUIRE(reports[0].episodes[i].correct == plain.episodes[i].correct);

    // sigma only changes the injected noise, not which episodes are drawn
    for (const auto& r : reports) {
        REQUIRE(r.num_episodes == plain.num_episodes);
        for (std::size_t i = 0; i < r.episodes.size(); ++i)
            REQUIRE(r.episodes[i].queries == plain.episodes[i].queries);
    }
}

TEST_CASE("shot sweep reaches far past the training length") {
    ModelConfig mc = tiny_config(Family::mamba);
    mc.vocab_size = 32;
    Model m = init_model(mc, 6);
    SamplePool pool = wide_pool(20, 51);

    auto reports = sweep_shots(m, &pool, EpisodeKind::classification, {2, 50}, 20, 1, 17);
    REQUIRE(reports.size() == 2);
    REQUIRE(reports[0].setting.shots == 2);
    REQUIRE(reports[1].setting.shots == 50);
    REQUIRE(reports[1].total_queries == 20); // one query per class at length 2001
    REQUIRE(std::isfinite(reports[1].metric_mean));
}

TEST_CASE("regression scoring equals the hand-computed error") {
    ModelConfig mc = tiny_config(Family::mamba);
    mc.input_dim = sine_points;
    mc.target_dim = sine_points;
    Model m = init_model(mc, 10);
    for (double& x : m.head_W.data()) x = 0.0;
    for (double& x : m.head_b.data()) x = 0.0;

    std::uint64_t seed = 33;
    EvalReport rep = meta_test(m, nullptr, EpisodeKind::sine, 3, 2, 4, seed);
    REQUIRE(!rep.classification);
    for (std::size_t i = 0; i < rep.num_episodes; ++i) {
        Rng erng = eval_episode_rng(seed, i);
        Episode ep = make_episode(EpisodeKind::sine, nullptr, 3, 2, 1, mc.vocab_size, erng);
        double want = 0.0;
        for (const auto& t : ep.tests) {
            double se = 0.0;
            for (double y : t.y_vec) se += y * y;
            want += se / static_cast<double>(t.y_vec.size());
        }
        want /= static_cast<double>(ep.tests.size());
        REQUIRE(std::abs(rep.episodes[i].metric - want) < 1e-15);
    }
}

TEST_CASE("rotation scoring stays within the metric range") {
    ModelConfig mc = tiny_config(Family::linear_tf);
    mc.target_dim = 2;
    Model m = init_model(mc, 14);
    SamplePool pool = wide_pool(6, 3);

    EvalReport rep = meta_test(m, &pool, EpisodeKind::rotation, 3, 2, 4, 21);
    REQUIRE(!rep.classification);
    REQUIRE(rep.metric_mean >= 0.0);
    REQUIRE(rep.metric_mean <= 2.0);
}

TEST_CASE("meta test rejects empty settings") {
    Model m = init_model(tiny_config(Family::mamba), 1);
    SamplePool pool = wide_pool(6, 3);
    REQUIRE_THROWS_AS(meta_test(m, &pool, EpisodeKind::classification, 3, 2, 0, 1),
                      contract_error);
    REQUIRE_THROWS_AS(meta_test(m, &pool, EpisodeKind::classification, 12, 2, 1, 1),
                      config_error);
    REQUIRE_THROWS_AS(meta_test(m, nullptr, EpisodeKind::classification, 3, 2, 1, 1),
                      contract_error);
}

TEST_CASE("eval reports serialize with the mandated header") {
    Model m = init_model(tiny_config(Family::mamba), 8);
    SamplePool pool = wide_pool(8, 3);
    auto reports = sweep_tasks(m, &pool, EpisodeKind::classification, {2, 4}, 2, 2, 5);

    write_eval_csv("eval_report_test.csv", reports);
    auto lines = read_lines("eval_report_test.csv");
    REQUIRE(lines.size() == 3);
    REQUIRE(lines[0] == "setting,K,S,sigma,episodes,metric_mean,metric_std");
    auto f = split_csv(lines[1]);
    REQUIRE(f.size() == 7);
    REQUIRE(f[0] == "mamba:classification");
    REQUIRE(f[1] == "2");
    REQUIRE(f[2] == "2");
    REQUIRE(std::stod(f[5]) == reports[0].metric_mean);
    std::remove("eval_report_test.csv");

    REQUIRE_THROWS_AS(write_eval_csv("no_such_dir/eval.csv", reports), io_error);
}

TEST_CASE("association export writes the score matrix and position map") {
    Model m = init_model(tiny_config(Family::transformer), 19);
    SamplePool pool = wide_pool(6, 3);
    Rng rng(40);
    Episode ep = make_classification_episode(pool, 3, 2, 1, 9, rng);

    export_association_matrix(m, ep, "assoc_test.csv");
    auto lines = read_lines("assoc_test.csv");
    REQUIRE(lines.size() == 3); // one row per test query
    for (const auto& line : lines) REQUIRE(split_csv(line).size() == 12);

    // rows must be the raw final-layer q.k scores of the recorded forward pass
    for (std::size_t qi = 0; qi < ep.tests.size(); ++qi) {
        SequenceLayout layout = assemble_sequence(ep, qi);
        AssocLog log;
        model_forward(m, layout.tokens, &log);
        AssociationScores s =
            extract_association(log, Family::transformer, log.q_feats.size() - 1, 12);
        auto fields = split_csv(lines[qi]);
        for (std::size_t j = 0; j < s.scores.size(); ++j)
            REQUIRE(std::stod(fields[j]) == s.scores[j]);
    }

    auto side = read_lines("assoc_test_positions.csv");
    REQUIRE(side.size() == 13);
    REQUIRE(side[0] == "position,task,shot,kind");
    for (std::size_t pos = 0; pos < 12; ++pos) {
        auto f = split_csv(side[pos + 1]);
        REQUIRE(f.size() == 4);
        REQUIRE(f[0] == std::to_string(pos));
        REQUIRE(f[1] == std::to_string(ep.stream[pos / 2].y_class));
        REQUIRE(f[2] == std::to_string((pos / 2) % 2));
        REQUIRE(f[3] == (pos % 2 == 0 ? "x" : "code"));
    }
    std::remove("assoc_test.csv");
    std::remove("assoc_test_positions.csv");

    REQUIRE_THROWS_AS(export_association_matrix(m, ep, "no_such_dir/assoc.csv"), io_error);
}

TEST_CASE("state size is flat for recurrent families and affine for attention") {
    std::vector<std::size_t> lengths{51, 201, 1001, 2001};
    for (Family f : {Family::mamba, Family::linear_tf, Family::performer}) {
        CostReport rep = measure_costs(tiny_config(f), lengths);
        REQUIRE(rep.state_bytes.size() == 4);
        for (std::size_t i = 1; i < 4; ++i) {
            REQUIRE(rep.state_bytes[i] == rep.state_bytes[0]);
            REQUIRE(rep.token_step_flops[i] == rep.token_step_flops[0]);
        }
        REQUIRE(rep.params_count > 0);
    }

    ModelConfig tc = tiny_config(Family::transformer);
    CostReport rep = measure_costs(tc, lengths);
    std::size_t per_token = tc.num_layers * (tc.head_dim + tc.hidden_dim) * 8;
    for (std::size_t i = 1; i < 4; ++i) {
        std::size_t grown = lengths[i] - lengths[i - 1];
        REQUIRE(rep.state_bytes[i] - rep.state_bytes[i - 1] == grown * per_token);
        REQUIRE(rep.token_step_flops[i] > rep.token_step_flops[i - 1]);
    }
    REQUIRE(rep.params_count == init_model(tc, 0).param_count());

    write_cost_csv("cost_test.csv", rep);
    auto lines = read_lines("cost_test.csv");
    REQUIRE(lines.size() == 5);
    REQUIRE(lines[0] == "family,length,state_bytes,token_step_flops,params");
    REQUIRE(split_csv(lines[1])[0] == "transformer");
    std::remove("cost_test.csv");
}
