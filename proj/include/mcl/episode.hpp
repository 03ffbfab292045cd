#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mcl/error.hpp"
#include "mcl/rng.hpp"
#include "mcl/token.hpp"

namespace mcl {

enum class PoolSource { synthetic_gaussian, embedding_file };
enum class Split { meta_train, meta_test };

struct PoolItem {
    std::vector<double> embedding;
    int class_id = 0;
};

// Immutable labeled-embedding collection episodes are sampled from. Class ids
// must not overlap between the meta-train and meta-test pools of a run.
struct SamplePool {
    std::vector<PoolItem> items;
    PoolSource source = PoolSource::synthetic_gaussian;
    Split split = Split::meta_train;

    std::size_t dim() const { return items.empty() ? 0 : items[0].embedding.size(); }

    std::map<int, std::vector<std::size_t>> by_class() const {
        std::map<int, std::vector<std::size_t>> out;
        for (std::size_t i = 0; i < items.size(); ++i) out[items[i].class_id].push_back(i);
        return out;
    }
};

inline void check_split_disjoint(const SamplePool& a, const SamplePool& b) {
    auto ca = a.by_class(), cb = b.by_class();
    for (const auto& [id, idx] : ca)
        if (cb.count(id))
            throw data_error("class " + std::to_string(id) +
                             " appears in both meta-train and meta-test pools");
}

enum class EpisodeKind { classification, sine, rotation, completion };

inline const char* episode_kind_name(EpisodeKind k) {
    switch (k) {
    case EpisodeKind::classification: return "classification";
    case EpisodeKind::sine: return "sine";
    case EpisodeKind::rotation: return "rotation";
    case EpisodeKind::completion: return "completion";
    }
    return "?";
}

struct LabeledSample {
    std::vector<double> x;
    int y_class = -1;          // class id, or task index for regression kinds
    std::vector<double> y_vec; // regression target, empty for classification
};

struct Episode {
    EpisodeKind kind = EpisodeKind::classification;
    std::vector<LabeledSample> stream; // num_tasks contiguous segments of `shots`
    std::vector<LabeledSample> tests;
    std::map<int, int> token_codes; // class id -> vocabulary code
    std::size_t num_tasks = 0;
    std::size_t shots = 0;
};

struct SequenceLayout {
    EpisodeKind kind = EpisodeKind::classification;
    std::vector<Token> tokens;
    std::vector<std::size_t> query_positions; // x-token indices that get scored
    std::vector<int> labels;                  // vocabulary code per query
    std::vector<std::vector<double>> targets; // regression target per query
};

namespace detail_ep {

// first k entries of a uniform shuffle of 0..n-1
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k,
                                                           Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t j = i + rng.uniform_index(n - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
}

} // namespace detail_ep

// Draws one distinct vocabulary code per class slot, uniformly without
// replacement. Codes mean nothing across episodes; every episode redraws.
inline std::map<int, int> assign_target_tokens(std::size_t num_classes, std::size_t vocab_size,
                                               Rng& rng) {
    if (num_classes > vocab_size)
        throw config_error("assign_target_tokens: " + std::to_string(num_classes) +
                           " classes exceed vocabulary of " + std::to_string(vocab_size));
    auto codes = detail_ep::sample_without_replacement(vocab_size, num_classes, rng);
    std::map<int, int> out;
    for (std::size_t i = 0; i < num_classes; ++i)
        out[static_cast<int>(i)] = static_cast<int>(codes[i]);
    return out;
}

namespace detail_ep {

// class/item sampling shared by the classification and regression episode
// builders; leaves token codes unassigned
inline Episode sample_pairs(const SamplePool& pool, std::size_t tasks, std::size_t shots,
                            std::size_t tests_per_class, Rng& rng) {
    if (tasks == 0 || shots == 0)
        throw config_error("episode sampling: tasks and shots must be positive");
    std::size_t need = shots + tests_per_class;
    auto groups = pool.by_class();
    std::vector<int> eligible;
    for (const auto& [id, idx] : groups)
        if (idx.size() >= need) eligible.push_back(id);
    if (eligible.size() < tasks)
        throw data_error("episode sampling: need " + std::to_string(tasks) +
                         " classes with >= " + std::to_string(need) + " items, pool offers " +
                         std::to_string(eligible.size()));
    auto slots = sample_without_replacement(eligible.size(), tasks, rng);
    Episode ep;
    ep.kind = EpisodeKind::classification;
    ep.num_tasks = tasks;
    ep.shots = shots;
    for (std::size_t s = 0; s < tasks; ++s) {
        int cls = eligible[slots[s]];
        const auto& idx = groups[cls];
        auto pick = sample_without_replacement(idx.size(), need, rng);
        for (std::size_t i = 0; i < shots; ++i)
            ep.stream.push_back({pool.items[idx[pick[i]]].embedding, cls, {}});
        for (std::size_t i = shots; i < need; ++i)
            ep.tests.push_back({pool.items[idx[pick[i]]].embedding, cls, {}});
    }
    return ep;
}

} // namespace detail_ep

// Gives each distinct class in the episode a fresh vocabulary code.
// Classification only; regression kinds carry vector targets instead.
inline void assign_episode_codes(Episode& ep, std::size_t vocab_size, Rng& rng) {
    if (ep.kind != EpisodeKind::classification) return;
    std::map<int, int> order;
    for (const auto& s : ep.stream) order[s.y_class] = 0;
    auto slot_map = assign_target_tokens(order.size(), vocab_size, rng);
    std::size_t slot = 0;
    for (auto& [cls, code] : order) code = slot_map[static_cast<int>(slot++)];
    ep.token_codes = order;
}

inline Episode make_classification_episode(const SamplePool& pool, std::size_t tasks,
                                           std::size_t shots, std::size_t tests_per_class,
                                           std::size_t vocab_size, Rng& rng) {
    Episode ep = detail_ep::sample_pairs(pool, tasks, shots, tests_per_class, rng);
    assign_episode_codes(ep, vocab_size, rng);
    return ep;
}

inline SamplePool make_synthetic_pool(std::size_t num_classes, std::size_t items_per_class,
                                      std::size_t dim, double cluster_std, Rng& rng,
                                      Split split = Split::meta_train, int first_class_id = 0) {
    if (num_classes == 0 || items_per_class == 0 || dim == 0)
        throw config_error("make_synthetic_pool: zero-sized pool requested");
    if (cluster_std < 0)
        throw config_error("make_synthetic_pool: negative cluster_std");
    SamplePool pool;
    pool.source = PoolSource::synthetic_gaussian;
    pool.split = split;
    pool.items.reserve(num_classes * items_per_class);
    for (std::size_t c = 0; c < num_classes; ++c) {
        std::vector<double> mean(dim);
        double norm = 0.0;
        do {
            norm = 0.0;
            for (auto& v : mean) {
                v = rng.gaussian();
                norm += v * v;
            }
        } while (norm == 0.0);
        norm = std::sqrt(norm);
        for (auto& v : mean) v /= norm;
        for (std::size_t i = 0; i < items_per_class; ++i) {
            PoolItem item;
            item.class_id = first_class_id + static_cast<int>(c);
            item.embedding.resize(dim);
            for (std::size_t d = 0; d < dim; ++d)
                item.embedding[d] = mean[d] + cluster_std * rng.gaussian();
            pool.items.push_back(std::move(item));
        }
    }
    return pool;
}

// Binary pool file: magic "MCLPOOL1"; u32 num_items, dim, num_classes; then
// per item u32 class_id + dim little-endian float32 values.
inline constexpr char pool_magic[8] = {'M', 'C', 'L', 'P', 'O', 'O', 'L', '1'};

namespace detail_ep {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct PoolCursor {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;
    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw format_error(std::string("pool file truncated reading ") + what, pos);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    float f32(const char* what) {
        std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

} // namespace detail_ep

inline void write_embedding_pool(const std::string& path, const SamplePool& pool) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), pool_magic, pool_magic + 8);
    std::map<int, int> classes;
    for (const auto& item : pool.items) classes[item.class_id] = 1;
    detail_ep::put_u32(out, static_cast<std::uint32_t>(pool.items.size()));
    detail_ep::put_u32(out, static_cast<std::uint32_t>(pool.dim()));
    detail_ep::put_u32(out, static_cast<std::uint32_t>(classes.size()));
    for (const auto& item : pool.items) {
        if (item.embedding.size() != pool.dim())
            throw data_error("write_embedding_pool: ragged embedding sizes");
        if (item.class_id < 0)
            throw data_error("write_embedding_pool: negative class id");
        detail_ep::put_u32(out, static_cast<std::uint32_t>(item.class_id));
        for (double v : item.embedding) detail_ep::put_f32(out, static_cast<float>(v));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw io_error("write failed for '" + path + "'");
}

inline SamplePool load_embedding_pool(const std::string& path, Split split = Split::meta_train) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open '" + path + "' for reading");
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    detail_ep::PoolCursor cur{buf};
    cur.need(8, "magic");
    if (std::memcmp(buf.data(), pool_magic, 8) != 0)
        throw format_error("not a pool file (bad magic)", 0);
    cur.pos = 8;
    std::uint32_t num_items = cur.u32("item count");
    std::uint32_t dim = cur.u32("dimension");
    std::uint32_t num_classes = cur.u32("class count");
    if (dim == 0) throw format_error("pool file declares zero dimension", 12);
    SamplePool pool;
    pool.source = PoolSource::embedding_file;
    pool.split = split;
    pool.items.reserve(num_items);
    std::map<int, int> seen;
    for (std::uint32_t i = 0; i < num_items; ++i) {
        PoolItem item;
        item.class_id = static_cast<int>(cur.u32("class id"));
        seen[item.class_id] = 1;
        item.embedding.resize(dim);
        for (std::uint32_t d = 0; d < dim; ++d)
            item.embedding[d] = static_cast<double>(cur.f32("embedding value"));
        pool.items.push_back(std::move(item));
    }
    if (cur.pos != buf.size())
        throw format_error("trailing bytes after last item", cur.pos);
    if (seen.size() != num_classes)
        throw format_error("header declares " + std::to_string(num_classes) +
                               " classes but payload holds " + std::to_string(seen.size()),
                           12);
    return pool;
}

// y evaluates the wave at 50 fixed points; x is the same wave with a per-task
// phase shift plus Gaussian noise. Amplitude is redrawn per shot, frequency
// and phase per task.
inline constexpr std::size_t sine_points = 50;
inline constexpr double pi_const = 3.14159265358979323846;

inline double sine_value(double amp, double freq, double phase, double tau) {
    return amp * std::sin(2.0 * pi_const * freq * tau + phase);
}

// the 50 predefined evaluation points are i/50 for i = 0..49
inline std::vector<double> sine_targets(double amp, double freq, double phase) {
    std::vector<double> y(sine_points);
    for (std::size_t i = 0; i < sine_points; ++i)
        y[i] = sine_value(amp, freq, phase,
                          static_cast<double>(i) / static_cast<double>(sine_points));
    return y;
}

inline Episode make_sine_episode(std::size_t num_tasks, std::size_t shots, Rng& rng,
                                 std::size_t tests_per_task = 1) {
    if (num_tasks == 0 || shots == 0)
        throw config_error("make_sine_episode: tasks and shots must be positive");
    Episode ep;
    ep.kind = EpisodeKind::sine;
    ep.num_tasks = num_tasks;
    ep.shots = shots;
    for (std::size_t k = 0; k < num_tasks; ++k) {
        double freq = rng.uniform(0.5, 2.0);
        double phase = rng.uniform(0.0, 2.0 * pi_const);
        double shift = rng.uniform(-pi_const, pi_const);
        auto draw = [&](std::vector<LabeledSample>& dst) {
            double amp = rng.uniform(0.5, 2.0);
            LabeledSample s;
            s.y_class = static_cast<int>(k);
            s.y_vec = sine_targets(amp, freq, phase);
            s.x.resize(sine_points);
            for (std::size_t i = 0; i < sine_points; ++i)
                s.x[i] = sine_value(amp, freq, phase + shift,
                                    static_cast<double>(i) / static_cast<double>(sine_points)) +
                         0.1 * rng.gaussian();
            dst.push_back(std::move(s));
        };
        for (std::size_t s = 0; s < shots; ++s) draw(ep.stream);
        for (std::size_t s = 0; s < tests_per_task; ++s) draw(ep.tests);
    }
    return ep;
}

inline double rotation_error(double predicted_angle, double true_angle) {
    if (!std::isfinite(predicted_angle) || !std::isfinite(true_angle))
        throw contract_error("rotation_error: non-finite angle");
    return 1.0 - std::cos(predicted_angle - true_angle);
}

// Rotates consecutive coordinate pairs of an even-dimensional embedding by the
// same planar angle. The target is (cos, sin) of that angle; the readback for
// scoring is atan2 over the predicted pair.
inline std::vector<double> rotate_pairs(const std::vector<double>& v, double angle) {
    if (v.size() % 2 != 0)
        throw data_error("rotate_pairs: embedding length " + std::to_string(v.size()) +
                         " is odd");
    double c = std::cos(angle), s = std::sin(angle);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i + 1 < v.size(); i += 2) {
        out[i] = c * v[i] - s * v[i + 1];
        out[i + 1] = s * v[i] + c * v[i + 1];
    }
    return out;
}

inline Episode make_rotation_episode(const SamplePool& pool, std::size_t tasks,
                                     std::size_t shots, Rng& rng,
                                     std::size_t tests_per_task = 1) {
    if (pool.dim() % 2 != 0)
        throw data_error("make_rotation_episode: pool dimension must be even");
    Episode base = detail_ep::sample_pairs(pool, tasks, shots, tests_per_task, rng);
    Episode ep;
    ep.kind = EpisodeKind::rotation;
    ep.num_tasks = tasks;
    ep.shots = shots;
    auto rotate_into = [&](const LabeledSample& src, std::vector<LabeledSample>& dst) {
        double angle = rng.uniform(0.0, 2.0 * pi_const);
        LabeledSample s;
        s.y_class = src.y_class;
        s.x = rotate_pairs(src.x, angle);
        s.y_vec = {std::cos(angle), std::sin(angle)};
        dst.push_back(std::move(s));
    };
    for (const auto& src : base.stream) rotate_into(src, ep.stream);
    for (const auto& src : base.tests) rotate_into(src, ep.tests);
    return ep;
}

inline Episode make_completion_episode(const SamplePool& pool, std::size_t tasks,
                                       std::size_t shots, Rng& rng,
                                       std::size_t tests_per_task = 1) {
    if (pool.dim() % 2 != 0)
        throw data_error("make_completion_episode: item length " + std::to_string(pool.dim()) +
                         " is odd, cannot split in half");
    Episode base = detail_ep::sample_pairs(pool, tasks, shots, tests_per_task, rng);
    Episode ep;
    ep.kind = EpisodeKind::completion;
    ep.num_tasks = tasks;
    ep.shots = shots;
    std::size_t half = pool.dim() / 2;
    auto split_into = [&](const LabeledSample& src, std::vector<LabeledSample>& dst) {
        LabeledSample s;
        s.y_class = src.y_class;
        s.x.assign(src.x.begin(), src.x.begin() + half);
        s.y_vec.assign(src.x.begin() + half, src.x.end());
        dst.push_back(std::move(s));
    };
    for (const auto& src : base.stream) split_into(src, ep.stream);
    for (const auto& src : base.tests) split_into(src, ep.tests);
    return ep;
}

inline std::size_t episode_input_dim(const Episode& ep) {
    if (!ep.stream.empty()) return ep.stream[0].x.size();
    throw contract_error("episode_input_dim: empty stream");
}

// 0 means "vocabulary-sized classification head"
inline std::size_t episode_target_dim(const Episode& ep) {
    if (ep.kind == EpisodeKind::classification) return 0;
    if (ep.stream.empty()) throw contract_error("episode_target_dim: empty stream");
    return ep.stream[0].y_vec.size();
}

// Lays out one single-query token sequence: x1 y1 ... xN yN x_query. The
// sequence length is 2 * tasks * shots + 1.
inline SequenceLayout assemble_sequence(const Episode& ep, std::size_t query_index) {
    if (query_index >= ep.tests.size())
        throw contract_error("assemble_sequence: query " + std::to_string(query_index) +
                             " of " + std::to_string(ep.tests.size()) + " test items");
    SequenceLayout out;
    out.kind = ep.kind;
    out.tokens.reserve(2 * ep.stream.size() + 1);
    bool classify = ep.kind == EpisodeKind::classification;
    for (const auto& s : ep.stream) {
        out.tokens.push_back(Token::from_vec(s.x));
        if (classify) {
            auto it = ep.token_codes.find(s.y_class);
            if (it == ep.token_codes.end())
                throw contract_error("assemble_sequence: class " + std::to_string(s.y_class) +
                                     " has no vocabulary code");
            out.tokens.push_back(Token::from_code(it->second));
        } else {
            out.tokens.push_back(Token::from_vec(s.y_vec));
        }
    }
    const LabeledSample& q = ep.tests[query_index];
    out.query_positions.push_back(out.tokens.size());
    out.tokens.push_back(Token::from_vec(q.x));
    if (classify) {
        auto it = ep.token_codes.find(q.y_class);
        if (it == ep.token_codes.end())
            throw contract_error("assemble_sequence: query class " + std::to_string(q.y_class) +
                                 " has no vocabulary code");
        out.labels.push_back(it->second);
    } else {
        out.labels.push_back(-1);
        out.targets.push_back(q.y_vec);
    }
    return out;
}

// Kind dispatcher shared by the training and evaluation loops. `pool` may be
// null for the pool-free sine tasks; `vocab_size` only matters for
// classification code assignment.
inline Episode make_episode(EpisodeKind kind, const SamplePool* pool, std::size_t tasks,
                            std::size_t shots, std::size_t tests_per_task,
                            std::size_t vocab_size, Rng& rng) {
    if (kind == EpisodeKind::sine) return make_sine_episode(tasks, shots, rng, tests_per_task);
    if (!pool)
        throw contract_error(std::string(episode_kind_name(kind)) +
                             " episodes need a sample pool");
    switch (kind) {
        case EpisodeKind::classification:
            return make_classification_episode(*pool, tasks, shots, tests_per_task,
                                               vocab_size, rng);
        case EpisodeKind::rotation:
            return make_rotation_episode(*pool, tasks, shots, rng, tests_per_task);
        case EpisodeKind::completion:
            return make_completion_episode(*pool, tasks, shots, rng, tests_per_task);
        default:
            throw contract_error("make_episode: unhandled episode kind");
    }
}

// Adds Gaussian noise to the x-embeddings of `count` uniformly chosen stream
// samples, leaving everything else untouched.
inline Episode inject_noise(const Episode& ep, double sigma, std::size_t count, Rng& rng) {
    if (sigma < 0) throw contract_error("inject_noise: negative sigma");
    if (count > ep.stream.size())
        throw contract_error("inject_noise: " + std::to_string(count) + " injections into " +
                             std::to_string(ep.stream.size()) + " stream samples");
    Episode out = ep;
    if (sigma == 0.0 || count == 0) return out;
    auto picks = detail_ep::sample_without_replacement(out.stream.size(), count, rng);
    for (std::size_t i : picks)
        for (auto& v : out.stream[i].x) v += sigma * rng.gaussian();
    return out;
}

} // namespace mcl
