#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "mcl/episode.hpp"
#include "mcl/error.hpp"
#include "mcl/model.hpp"
#include "mcl/rng.hpp"
#include "mcl/selectivity.hpp"
#include "mcl/streaming.hpp"

namespace mcl {

struct EvalSetting {
    Family family = Family::mamba;
    EpisodeKind kind = EpisodeKind::classification;
    std::size_t tasks = 0; // K
    std::size_t shots = 0; // S
    double sigma = 0.0;
};

struct EpisodeRecord {
    double metric = 0.0; // accuracy (classification) or mean error (regression)
    std::size_t queries = 0;
    std::size_t correct = 0; // classification only
};

struct EvalReport {
    EvalSetting setting;
    std::size_t num_episodes = 0;
    bool classification = true; // metric is accuracy when true, an error when false
    double metric_mean = 0.0;   // mean of per-episode metrics
    double metric_std = 0.0;    // sample std over per-episode metrics
    std::size_t total_queries = 0;
    std::size_t total_correct = 0;
    double wall_seconds = 0.0; // informational only, never part of any gate
    std::vector<EpisodeRecord> episodes;

    // pooled accuracy over every scored query, for calibration checks
    double overall_accuracy() const {
        return total_queries ? static_cast<double>(total_correct) /
                                   static_cast<double>(total_queries)
                             : 0.0;
    }
};

// Evaluation episodes come from a fixed per-index seed family, independent of
// how many settings a sweep visits: episode i is always drawn from fork(2i)
// and its noise from fork(2i+1), so sweep points are paired sample-for-sample.
inline Rng eval_episode_rng(std::uint64_t seed, std::size_t index) {
    return Rng(seed).fork(2 * index);
}
inline Rng eval_noise_rng(std::uint64_t seed, std::size_t index) {
    return Rng(seed).fork(2 * index + 1);
}

namespace detail_eval {

inline std::size_t argmax(const std::vector<double>& v) {
    return static_cast<std::size_t>(
        std::max_element(v.begin(), v.end()) - v.begin());
}

// Streams the training prefix once, then scores each test query from a copy
// of the frozen state, so query order cannot matter.
inline EpisodeRecord score_episode(const Model& m, const Episode& ep) {
    if (ep.tests.empty()) throw contract_error("score_episode: episode has no test queries");
    SequenceLayout base = assemble_sequence(ep, 0);
    StreamingState st = make_streaming_state(m);
    for (std::size_t i = 0; i + 1 < base.tokens.size(); ++i)
        stream_token(m, st, base.tokens[i]);

    EpisodeRecord rec;
    rec.queries = ep.tests.size();
    double err_sum = 0.0;
    for (const LabeledSample& test : ep.tests) {
        StreamingState snap = st;
        std::vector<double> out = stream_token(m, snap, Token::from_vec(test.x));
        if (ep.kind == EpisodeKind::classification) {
            auto it = ep.token_codes.find(test.y_class);
            if (it == ep.token_codes.end())
                throw contract_error("score_episode: test class " +
                                     std::to_string(test.y_class) + " has no code");
            if (argmax(out) == static_cast<std::size_t>(it->second)) rec.correct += 1;
        } else if (ep.kind == EpisodeKind::rotation) {
            if (out.size() < 2 || test.y_vec.size() < 2)
                throw contract_error("score_episode: rotation needs a 2-wide head");
            double pred = std::atan2(out[1], out[0]);
            double want = std::atan2(test.y_vec[1], test.y_vec[0]);
            err_sum += rotation_error(pred, want);
        } else {
            if (out.size() != test.y_vec.size())
                throw contract_error("score_episode: head width " + std::to_string(out.size()) +
                                     " vs target width " + std::to_string(test.y_vec.size()));
            double se = 0.0;
            for (std::size_t i = 0; i < out.size(); ++i) {
                double d = out[i] - test.y_vec[i];
                se += d * d;
            }
            err_sum += se / static_cast<double>(out.size());
        }
    }
    rec.metric = ep.kind == EpisodeKind::classification
                     ? static_cast<double>(rec.correct) / static_cast<double>(rec.queries)
                     : err_sum / static_cast<double>(rec.queries);
    return rec;
}

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace detail_eval

// Meta-test: `num_episodes` fresh episodes, each scored by streaming the
// training sequence once and answering every test query from the frozen
// state. sigma > 0 perturbs `noise_count` stream embeddings per episode
// before any token is built; sigma == 0 is exactly the clean evaluation.
inline EvalReport meta_test(const Model& m, const SamplePool* pool, EpisodeKind kind,
                            std::size_t tasks, std::size_t shots, std::size_t num_episodes,
                            std::uint64_t seed, double sigma = 0.0,
                            std::size_t noise_count = 5) {
    if (num_episodes < 1) throw contract_error("meta_test: needs at least one episode");
    if (kind == EpisodeKind::classification && tasks > m.cfg.vocab_size)
        throw config_error("meta_test: " + std::to_string(tasks) +
                           " tasks exceed the vocabulary of " +
                           std::to_string(m.cfg.vocab_size));
    auto t0 = std::chrono::steady_clock::now();
    EvalReport rep;
    rep.setting = {m.cfg.family, kind, tasks, shots, sigma};
    rep.num_episodes = num_episodes;
    rep.classification = kind == EpisodeKind::classification;
    rep.episodes.reserve(num_episodes);
    for (std::size_t i = 0; i < num_episodes; ++i) {
        Rng erng = eval_episode_rng(seed, i);
        Episode ep = make_episode(kind, pool, tasks, shots, 1, m.cfg.vocab_size, erng);
        if (sigma != 0.0) {
            Rng nrng = eval_noise_rng(seed, i);
            ep = inject_noise(ep, sigma, noise_count, nrng);
        }
        EpisodeRecord rec = detail_eval::score_episode(m, ep);
        rep.total_queries += rec.queries;
        rep.total_correct += rec.correct;
        rep.episodes.push_back(rec);
    }
    double sum = 0.0;
    for (const auto& r : rep.episodes) sum += r.metric;
    rep.metric_mean = sum / static_cast<double>(num_episodes);
    if (num_episodes > 1) {
        double ss = 0.0;
        for (const auto& r : rep.episodes) {
            double d = r.metric - rep.metric_mean;
            ss += d * d;
        }
        rep.metric_std = std::sqrt(ss / static_cast<double>(num_episodes - 1));
    }
    rep.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

inline std::vector<EvalReport> sweep_tasks(const Model& m, const SamplePool* pool,
                                           EpisodeKind kind,
                                           const std::vector<std::size_t>& task_counts,
                                           std::size_t shots, std::size_t num_episodes,
                                           std::uint64_t seed) {
    if (kind == EpisodeKind::classification)
        for (std::size_t k : task_counts)
            if (k > m.cfg.vocab_size)
                throw config_error("sweep_tasks: " + std::to_string(k) +
                                   " tasks exceed the vocabulary of " +
                                   std::to_string(m.cfg.vocab_size));
    std::vector<EvalReport> out;
    out.reserve(task_counts.size());
    for (std::size_t k : task_counts)
        out.push_back(meta_test(m, pool, kind, k, shots, num_episodes, seed));
    return out;
}

inline std::vector<EvalReport> sweep_shots(const Model& m, const SamplePool* pool,
                                           EpisodeKind kind,
                                           const std::vector<std::size_t>& shot_counts,
                                           std::size_t tasks, std::size_t num_episodes,
                                           std::uint64_t seed) {
    std::vector<EvalReport> out;
    out.reserve(shot_counts.size());
    for (std::size_t s : shot_counts)
        out.push_back(meta_test(m, pool, kind, tasks, s, num_episodes, seed));
    return out;
}

// One report per sigma; the shared evaluation seed family keeps the episodes
// identical across sigmas, so the only varying factor is the injected noise.
inline std::vector<EvalReport> sweep_noise(const Model& m, const SamplePool* pool,
                                           EpisodeKind kind, const std::vector<double>& sigmas,
                                           std::size_t tasks, std::size_t shots,
                                           std::size_t num_episodes, std::uint64_t seed,
                                           std::size_t noise_count = 5) {
    std::vector<EvalReport> out;
    out.reserve(sigmas.size());
    for (double s : sigmas)
        out.push_back(meta_test(m, pool, kind, tasks, shots, num_episodes, seed, s, noise_count));
    return out;
}

inline void write_eval_csv(const std::string& path, const std::vector<EvalReport>& reports) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot open '" + path + "' for writing");
    f << "setting,K,S,sigma,episodes,metric_mean,metric_std\n";
    for (const EvalReport& r : reports) {
        f << family_name(r.setting.family) << ':' << episode_kind_name(r.setting.kind) << ','
          << r.setting.tasks << ',' << r.setting.shots << ','
          << detail_eval::fmt_double(r.setting.sigma) << ',' << r.num_episodes << ','
          << detail_eval::fmt_double(r.metric_mean) << ','
          << detail_eval::fmt_double(r.metric_std) << '\n';
    }
    if (!f) throw io_error("write failed for '" + path + "'");
}

inline std::string association_sidecar_path(const std::string& out_path) {
    std::string suffix = ".csv";
    if (out_path.size() > suffix.size() &&
        out_path.compare(out_path.size() - suffix.size(), suffix.size(), suffix) == 0)
        return out_path.substr(0, out_path.size() - suffix.size()) + "_positions.csv";
    return out_path + "_positions.csv";
}

// Writes the raw (pre-softmax) association scores of the final layer: one row
// per test query, one column per stream token position. A sidecar CSV maps
// each column to its task, shot and token kind.
inline void export_association_matrix(const Model& m, const Episode& ep,
                                      const std::string& out_path) {
    if (ep.tests.empty())
        throw contract_error("export_association_matrix: episode has no test queries");
    std::ofstream f(out_path, std::ios::trunc);
    if (!f) throw io_error("cannot open '" + out_path + "' for writing");

    std::size_t stream_len = 2 * ep.stream.size();
    for (std::size_t qi = 0; qi < ep.tests.size(); ++qi) {
        SequenceLayout layout = assemble_sequence(ep, qi);
        AssocLog log;
        model_forward(m, layout.tokens, &log);
        AssociationScores s =
            extract_association(log, m.cfg.family, log.q_feats.size() - 1, stream_len);
        if (s.scores.size() != stream_len)
            throw contract_error("export_association_matrix: scored " +
                                 std::to_string(s.scores.size()) + " positions, expected " +
                                 std::to_string(stream_len));
        for (std::size_t j = 0; j < s.scores.size(); ++j) {
            if (j) f << ',';
            f << detail_eval::fmt_double(s.scores[j]);
        }
        f << '\n';
    }
    if (!f) throw io_error("write failed for '" + out_path + "'");

    std::string side_path = association_sidecar_path(out_path);
    std::ofstream side(side_path, std::ios::trunc);
    if (!side) throw io_error("cannot open '" + side_path + "' for writing");
    side << "position,task,shot,kind\n";
    bool classify = ep.kind == EpisodeKind::classification;
    for (std::size_t pos = 0; pos < stream_len; ++pos) {
        std::size_t pair = pos / 2;
        const LabeledSample& s = ep.stream[pair];
        const char* kind = pos % 2 == 0 ? "x" : (classify ? "code" : "y");
        side << pos << ',' << s.y_class << ',' << pair % ep.shots << ',' << kind << '\n';
    }
    if (!side) throw io_error("write failed for '" + side_path + "'");
}

struct CostReport {
    Family family = Family::mamba;
    std::vector<std::size_t> sequence_lengths;
    std::vector<std::size_t> state_bytes;      // serialized streaming state after n tokens
    std::vector<std::size_t> token_step_flops; // multiply-adds to process token n of n
    std::size_t params_count = 0;
};

namespace detail_eval {

// Multiply-add count for one streaming token step with `context` tokens in
// the state (context includes the token being processed). Convention: one
// count per scalar multiplication or division; additions, comparisons and
// transcendental calls ride along for free.
inline std::size_t token_flops(const ModelConfig& cfg, std::size_t context) {
    std::size_t M = cfg.hidden_dim;
    std::size_t ln = 2 * M + 2; // variance accumulation plus per-entry scaling
    std::size_t flops = cfg.input_dim * M; // input projector
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        if (cfg.family == Family::mamba) {
            std::size_t C = cfg.ssm_state_size;
            flops += ln;
            flops += M * 2 * M;          // in projection, main and gate halves
            flops += M * cfg.conv_width; // depthwise conv
            flops += 2 * M;              // silu
            flops += M + 1;              // timescale head and softplus input
            flops += 2 * M * C;          // B and C heads
            flops += 4 * C;              // A' and the discretization scalars
            flops += 2 * C * M;          // state decay and drive
            flops += C * M;              // readout
            flops += M;                  // skip scale
            flops += 3 * M;              // gating
            flops += M * M;              // out projection
        } else {
            std::size_t C = cfg.head_dim;
            flops += ln;
            flops += 2 * M * C + M * M; // q, k, v projections
            if (cfg.family == Family::transformer) {
                flops += context * C;     // scores
                flops += 2 * context;     // softmax scale and normalize
                flops += context * M;     // value mix
            } else {
                std::size_t F = cfg.family == Family::performer ? cfg.num_performer_features
                                                                : cfg.head_dim;
                if (cfg.family == Family::performer)
                    flops += 2 * (C * F + C + F); // feature maps for q and k
                else
                    flops += 2 * C; // elu+1 on q and k
                flops += 2 * F * M; // state update and readout
                flops += F + M;     // normalizer dot and divide
            }
            flops += ln;
            std::size_t FF = cfg.resolved_ffn_hidden();
            flops += M * FF + 2 * FF + FF * M; // ffn with silu
        }
        if (cfg.moe.num_experts > 0) {
            std::size_t E = cfg.moe.num_experts, H = cfg.resolved_expert_hidden();
            flops += ln;
            flops += M * E + 2 * E;                     // router and softmax
            flops += E * (M * H + 2 * H + H * M + M);   // experts and their mixing
        }
    }
    flops += ln;                          // final norm
    flops += M * cfg.resolved_target_dim(); // head
    return flops;
}

} // namespace detail_eval

// Streams `n` placeholder tokens per requested length and serializes the
// state, so the byte counts are measured, not modeled. Flop counts are the
// documented multiply-add tally for the final token of each prefix.
inline CostReport measure_costs(const ModelConfig& cfg,
                                const std::vector<std::size_t>& sequence_lengths) {
    Model m = init_model(cfg, 0);
    CostReport rep;
    rep.family = cfg.family;
    rep.sequence_lengths = sequence_lengths;
    rep.params_count = m.param_count();
    Token probe = Token::from_vec(std::vector<double>(cfg.input_dim, 0.0));
    for (std::size_t n : sequence_lengths) {
        if (n == 0) throw contract_error("measure_costs: zero-length sequence");
        StreamingState st = make_streaming_state(m);
        for (std::size_t i = 0; i < n; ++i) stream_token(m, st, probe);
        rep.state_bytes.push_back(serialize_streaming_state(st).size());
        rep.token_step_flops.push_back(detail_eval::token_flops(cfg, n));
    }
    return rep;
}

inline void write_cost_csv(const std::string& path, const CostReport& rep) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot open '" + path + "' for writing");
    f << "family,length,state_bytes,token_step_flops,params\n";
    for (std::size_t i = 0; i < rep.sequence_lengths.size(); ++i) {
        f << family_name(rep.family) << ',' << rep.sequence_lengths[i] << ','
          << rep.state_bytes[i] << ',' << rep.token_step_flops[i] << ',' << rep.params_count
          << '\n';
    }
    if (!f) throw io_error("write failed for '" + path + "'");
}

} // namespace mcl
