#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "model.hpp"

namespace mcl {

// Checkpoint file layout:
//   8 magic bytes "MCLCKPT1"
//   u32 length of the UTF-8 config block, then that many bytes of
//     newline-separated key=value lines
//   zero or more tensors until end of file, each
//     u32 name length, name bytes, u32 rank, one u64 extent per axis,
//     little-endian float64 payload
inline constexpr char checkpoint_magic[8] = {'M', 'C', 'L', 'C', 'K', 'P', 'T', '1'};

namespace detail_ckpt {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::vector<std::uint8_t>& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    put_u64(out, bits);
}

struct Cursor {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw format_error(std::string("checkpoint truncated while reading ") + what, pos);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    double f64(const char* what) {
        std::uint64_t bits = u64(what);
        double d;
        std::memcpy(&d, &bits, sizeof(d));
        return d;
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s(buf.begin() + pos, buf.begin() + pos + n);
        pos += n;
        return s;
    }
    bool at_end() const { return pos == buf.size(); }
};

inline std::map<std::string, std::string> parse_kv_block(const std::string& block,
                                                         std::size_t block_offset) {
    std::map<std::string, std::string> out;
    std::size_t start = 0;
    while (start < block.size()) {
        std::size_t end = block.find('\n', start);
        if (end == std::string::npos) end = block.size();
        std::string line = block.substr(start, end - start);
        if (!line.empty()) {
            std::size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw format_error("config line '" + line + "' lacks '='", block_offset + start);
            out[line.substr(0, eq)] = line.substr(eq + 1);
        }
        start = end + 1;
    }
    return out;
}

} // namespace detail_ckpt

struct CheckpointData {
    std::map<std::string, std::string> config;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

inline void write_checkpoint(const std::string& path,
                             const std::map<std::string, std::string>& config,
                             const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), checkpoint_magic, checkpoint_magic + 8);
    std::string block;
    for (const auto& [k, v] : config) block += k + "=" + v + "\n";
    detail_ckpt::put_u32(out, static_cast<std::uint32_t>(block.size()));
    out.insert(out.end(), block.begin(), block.end());
    for (const auto& [name, t] : tensors) {
        detail_ckpt::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        detail_ckpt::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t a = 0; a < t.rank(); ++a) detail_ckpt::put_u64(out, t.dim(a));
        for (double d : t.data()) detail_ckpt::put_f64(out, d);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
    if (!f) throw io_error("write failed for '" + path + "'");
}

inline CheckpointData read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open '" + path + "' for reading");
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    detail_ckpt::Cursor cur{buf};
    std::string magic = cur.bytes(8, "magic");
    if (std::memcmp(magic.data(), checkpoint_magic, 8) != 0)
        throw format_error("bad checkpoint magic '" + magic + "'", 0);
    std::uint32_t block_len = cur.u32("config block length");
    std::size_t block_offset = cur.pos;
    std::string block = cur.bytes(block_len, "config block");
    CheckpointData ck;
    ck.config = detail_ckpt::parse_kv_block(block, block_offset);
    while (!cur.at_end()) {
        std::uint32_t name_len = cur.u32("tensor name length");
        if (name_len == 0 || name_len > 4096)
            throw format_error("implausible tensor name length " + std::to_string(name_len),
                               cur.pos - 4);
        std::string name = cur.bytes(name_len, "tensor name");
        std::uint32_t rank = cur.u32("tensor rank");
        if (rank > 8)
            throw format_error("implausible tensor rank " + std::to_string(rank), cur.pos - 4);
        std::vector<std::size_t> shape(rank);
        std::size_t count = 1;
        for (std::uint32_t a = 0; a < rank; ++a) {
            std::uint64_t ext = cur.u64("tensor extent");
            if (ext > (1ull << 32))
                throw format_error("implausible extent " + std::to_string(ext), cur.pos - 8);
            shape[a] = static_cast<std::size_t>(ext);
            count *= shape[a];
        }
        std::vector<double> data(count);
        for (std::size_t i = 0; i < count; ++i) data[i] = cur.f64("tensor payload");
        ck.tensors.emplace_back(name, Tensor::from(std::move(data), shape));
    }
    return ck;
}

inline void save_model(const std::string& path, const Model& m,
                       const std::map<std::string, std::string>& extra = {},
                       const std::vector<std::pair<std::string, Tensor>>& extra_tensors = {}) {
    std::map<std::string, std::string> config = config_to_map(m.cfg);
    for (const auto& [k, v] : extra) config[k] = v;
    std::vector<std::pair<std::string, Tensor>> tensors = m.params;
    tensors.insert(tensors.end(), extra_tensors.begin(), extra_tensors.end());
    write_checkpoint(path, config, tensors);
}

inline Model model_from_checkpoint(const CheckpointData& ck) {
    ModelConfig cfg = config_from_map(ck.config);
    Model m = init_model(cfg, 0);
    for (auto& [name, param] : m.params) {
        const Tensor* stored = ck.find(name);
        if (!stored) throw data_error("checkpoint lacks tensor '" + name + "'");
        if (stored->shape() != param.shape())
            throw data_error("checkpoint tensor '" + name + "' has shape " +
                             detail::shape_string(stored->shape()) + ", model expects " +
                             detail::shape_string(param.shape()));
        param.data() = stored->data();
    }
    return m;
}

inline Model load_model(const std::string& path) {
    return model_from_checkpoint(read_checkpoint(path));
}

} // namespace mcl
