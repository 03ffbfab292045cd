#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mcl/episode.hpp"
#include "mcl/error.hpp"
#include "mcl/model.hpp"
#include "mcl/ops.hpp"

namespace mcl {

// Ground-truth association pattern for one scored x-token: over the 2t
// preceding tokens, both tokens of stream sample j are marked iff sample j
// carries the query's label.
struct AssociationTarget {
    std::size_t query_position = 0; // 0-based token index, always an x-token
    std::vector<double> pattern;    // length 2t
    std::size_t num_matches = 0;    // marked samples x 2
};

struct AssociationScores {
    std::size_t query_position = 0;
    std::vector<double> scores; // length 2t, unnormalized
    Family source = Family::transformer;
    std::size_t layer = 0;
};

inline AssociationTarget association_target(const std::vector<int>& stream_labels,
                                            int query_label, std::size_t query_position) {
    if (query_position % 2 != 0)
        throw contract_error("association_target: position " + std::to_string(query_position) +
                             " is a code token, only x-tokens are scored");
    std::size_t t = query_position / 2;
    if (t > stream_labels.size())
        throw contract_error("association_target: position " + std::to_string(query_position) +
                             " implies " + std::to_string(t) + " preceding samples, stream has " +
                             std::to_string(stream_labels.size()));
    AssociationTarget out;
    out.query_position = query_position;
    out.pattern.assign(2 * t, 0.0);
    for (std::size_t j = 0; j < t; ++j)
        if (stream_labels[j] == query_label) {
            out.pattern[2 * j] = 1.0;
            out.pattern[2 * j + 1] = 1.0;
            out.num_matches += 2;
        }
    return out;
}

// Dots the logged query features at `query_position` against every preceding
// token's key features: Q.K for the transformer, feature-mapped Q.K for the
// kernel families, C.B for the ssm family.
inline AssociationScores extract_association(const AssocLog& log, Family family,
                                             std::size_t layer, std::size_t query_position) {
    if (log.q_feats.empty())
        throw contract_error("extract_association: associations were not recorded for this run");
    if (layer >= log.q_feats.size())
        throw contract_error("extract_association: layer " + std::to_string(layer) + " of " +
                             std::to_string(log.q_feats.size()));
    const Tensor& Qf = log.q_feats[layer];
    const Tensor& Kf = log.k_feats[layer];
    if (query_position >= Qf.dim(0))
        throw contract_error("extract_association: position " + std::to_string(query_position) +
                             " beyond sequence of " + std::to_string(Qf.dim(0)));
    std::size_t w = Qf.dim(1);
    AssociationScores out;
    out.query_position = query_position;
    out.source = family;
    out.layer = layer;
    out.scores.resize(query_position);
    const auto& qv = Qf.data();
    const auto& kv = Kf.data();
    for (std::size_t j = 0; j < query_position; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < w; ++c) acc += qv[query_position * w + c] * kv[j * w + c];
        out.scores[j] = acc;
    }
    return out;
}

struct SelectivityValue {
    double value = 0.0;
    bool skipped = false; // query label absent from the preceding stream
};

// KL(normalized pattern || softmax(scores)); zero-match queries are defined
// as a skip rather than a loss.
inline SelectivityValue selectivity_loss(const AssociationTarget& target,
                                         const AssociationScores& scores) {
    if (target.pattern.size() != scores.scores.size())
        throw contract_error("selectivity_loss: pattern of " +
                             std::to_string(target.pattern.size()) + " vs scores of " +
                             std::to_string(scores.scores.size()));
    if (target.num_matches == 0) return {0.0, true};
    std::vector<double> q = softmax(scores.scores);
    double inv = 1.0 / static_cast<double>(target.num_matches);
    double acc = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (target.pattern[i] == 0.0) continue;
        double p = target.pattern[i] * inv;
        acc += p * (std::log(p) - std::log(q[i]));
    }
    return {acc, false};
}

namespace detail_slct {

// tape form of the same KL, differentiable through the logged features:
// KL(p||softmax(s)) = sum_p p log p - sum_p p log_softmax(s)
inline Tensor selectivity_loss_t(const AssociationTarget& target, const Tensor& scores_row) {
    std::size_t n = target.pattern.size();
    double inv = 1.0 / static_cast<double>(target.num_matches);
    double entropy_part = 0.0;
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = target.pattern[i] * inv;
        if (p[i] > 0.0) entropy_part += p[i] * std::log(p[i]);
    }
    Tensor pt = Tensor::from(p, {1, n});
    Tensor cross = sum_all(mul(pt, log_softmax(scores_row)));
    return scalar_add(neg(cross), entropy_part);
}

} // namespace detail_slct

enum class SlctPositions { queries_only, queries_and_stream };
enum class SlctLayers { final_only, all_layers };

// Scored positions of a single-query classification layout: the appended
// query, optionally also every stream x-token (their own label plays the
// query role). Regression layouts have no code labels and score nothing.
inline std::vector<std::pair<std::size_t, int>>
selectivity_positions(const SequenceLayout& layout, SlctPositions mode) {
    std::vector<std::pair<std::size_t, int>> out;
    if (layout.kind != EpisodeKind::classification) return out;
    if (mode == SlctPositions::queries_and_stream)
        for (std::size_t pos = 2; pos + 1 < layout.tokens.size(); pos += 2)
            out.push_back({pos, layout.tokens[pos + 1].code});
    for (std::size_t i = 0; i < layout.query_positions.size(); ++i)
        out.push_back({layout.query_positions[i], layout.labels[i]});
    return out;
}

// Mean tape-mode selectivity loss over the layout's scored positions,
// skipping zero-match queries; a plain zero scalar when nothing scores.
inline Tensor episode_selectivity_loss(const SequenceLayout& layout, const AssocLog& log,
                                       SlctPositions positions = SlctPositions::queries_only,
                                       SlctLayers layers = SlctLayers::final_only) {
    auto scored = selectivity_positions(layout, positions);
    if (scored.empty()) return Tensor::scalar(0.0);
    if (log.q_feats.empty())
        throw contract_error("episode_selectivity_loss: associations were not recorded");
    std::vector<int> stream_labels;
    for (std::size_t pos = 1; pos < layout.tokens.size(); pos += 2)
        stream_labels.push_back(layout.tokens[pos].code);
    std::size_t first_layer = layers == SlctLayers::all_layers ? 0 : log.q_feats.size() - 1;
    Tensor acc = Tensor::scalar(0.0);
    std::size_t hits = 0;
    for (const auto& [pos, label] : scored) {
        AssociationTarget target = association_target(stream_labels, label, pos);
        if (target.num_matches == 0) continue;
        Tensor per_pos = Tensor::scalar(0.0);
        std::size_t nl = 0;
        for (std::size_t l = first_layer; l < log.q_feats.size(); ++l) {
            Tensor q_row = row(log.q_feats[l], pos);
            Tensor hist = row_slice(log.k_feats[l], 0, pos);
            Tensor scores = matmul(q_row, transpose(hist)); // 1 x 2t
            per_pos = add(per_pos, detail_slct::selectivity_loss_t(target, scores));
            ++nl;
        }
        acc = add(acc, scalar_mul(per_pos, 1.0 / static_cast<double>(nl)));
        ++hits;
    }
    if (hits == 0) return Tensor::scalar(0.0);
    return scalar_mul(acc, 1.0 / static_cast<double>(hits));
}

} // namespace mcl
