#pragma once

// Checkpoint container: named parameters with a shape header, raw
// little-endian float32 payload (column-major), and the run-config echo
// for provenance.

#include "permnet/graph.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

namespace permnet {

struct CheckpointData {
    std::string config_echo;
    std::map<std::string, Eigen::MatrixXf> tensors;
};

namespace ckpt_detail {
inline void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}
} // namespace ckpt_detail

inline constexpr char kCheckpointMagic[8] = {'P', 'N', 'C', 'K', 'P', 'T', '0', '1'};

template <class S>
void save_checkpoint(const std::string& path, const ParameterStore<S>& store,
                     const std::string& config_echo) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
    os.write(kCheckpointMagic, 8);
    ckpt_detail::write_u64(os, config_echo.size());
    os.write(config_echo.data(), static_cast<std::streamsize>(config_echo.size()));
    ckpt_detail::write_u64(os, store.count());
    for (std::size_t i = 0; i < store.count(); ++i) {
        const auto& e = store.entry(i);
        ckpt_detail::write_u64(os, e.name.size());
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        ckpt_detail::write_u64(os, static_cast<std::uint64_t>(e.value.rows()));
        ckpt_detail::write_u64(os, static_cast<std::uint64_t>(e.value.cols()));
        Eigen::MatrixXf f = e.value.template cast<float>();
        static_assert(std::endian::native == std::endian::little,
                      "checkpoint writer assumes a little-endian host");
        os.write(reinterpret_cast<const char*>(f.data()),
                 static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(f.size())));
    }
    if (!os) throw std::runtime_error("short write on checkpoint: " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    CheckpointData d;
    const auto clen = ckpt_detail::read_u64(is);
    d.config_echo.resize(clen);
    is.read(d.config_echo.data(), static_cast<std::streamsize>(clen));
    const auto n = ckpt_detail::read_u64(is);
    for (std::uint64_t i = 0; i < n; ++i) {
        const auto nlen = ckpt_detail::read_u64(is);
        std::string name(nlen, '\0');
        is.read(name.data(), static_cast<std::streamsize>(nlen));
        const auto rows = ckpt_detail::read_u64(is);
        const auto cols = ckpt_detail::read_u64(is);
        Eigen::MatrixXf m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        is.read(reinterpret_cast<char*>(m.data()),
                static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(m.size())));
        if (!is) throw std::runtime_error("truncated checkpoint: " + path);
        d.tensors.emplace(std::move(name), std::move(m));
    }
    return d;
}

/// Load tensors into an existing store; shapes must match exactly.
template <class S>
void restore_parameters(ParameterStore<S>& store, const CheckpointData& d) {
    for (std::size_t i = 0; i < store.count(); ++i) {
        auto& e = store.entry(i);
        auto it = d.tensors.find(e.name);
        if (it == d.tensors.end())
            throw std::runtime_error("checkpoint is missing parameter: " + e.name);
        if (it->second.rows() != e.value.rows() || it->second.cols() != e.value.cols())
            throw std::runtime_error("checkpoint shape mismatch for parameter: " + e.name);
        e.value = it->second.template cast<S>();
    }
    if (store.count() != d.tensors.size())
        throw std::runtime_error("checkpoint has extra parameters");
}

} // namespace permnet
