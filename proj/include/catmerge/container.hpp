#pragma once

// MTC1 container: the on-disk format for checkpoints, task vectors, datasets
// and exemplar sets.
//
//   bytes 0..3   magic "MTC1"
//   bytes 4..7   header length H, u32 little-endian
//   bytes 8..8+H UTF-8 JSON header, right-padded with spaces so the payload
//                starts on an 8-byte boundary
//   payload      little-endian tensor data; each tensor at `offset` bytes from
//                the payload start, offsets ascending and 8-byte aligned,
//                gaps zero-filled
//
// Header key order is fixed: {"version","tensors","meta"}, and each tensor is
// {"name","kind","dtype","shape","offset","nbytes"}. Meta keys are sorted.
// The JSON is dumped without whitespace, so equal checkpoints give equal files.

#include "catmerge/tensor.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>

namespace catmerge {

enum class ContainerErrc {
    Io,
    BadMagic,
    BadHeader,
    Truncated,
    Overlap,
    Misaligned,
    SizeMismatch,
    NonFinite,
    Invariant,
};

inline std::string_view errc_name(ContainerErrc e) {
    switch (e) {
        case ContainerErrc::Io: return "Io";
        case ContainerErrc::BadMagic: return "BadMagic";
        case ContainerErrc::BadHeader: return "BadHeader";
        case ContainerErrc::Truncated: return "Truncated";
        case ContainerErrc::Overlap: return "Overlap";
        case ContainerErrc::Misaligned: return "Misaligned";
        case ContainerErrc::SizeMismatch: return "SizeMismatch";
        case ContainerErrc::NonFinite: return "NonFinite";
        case ContainerErrc::Invariant: return "Invariant";
    }
    return "?";
}

class ContainerError : public std::runtime_error {
public:
    ContainerError(ContainerErrc code, const std::string& msg)
        : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}
    ContainerErrc code() const { return code_; }

private:
    ContainerErrc code_;
};

namespace detail {

inline constexpr char kMagic[4] = {'M', 'T', 'C', '1'};
inline constexpr std::size_t kAlign = 8;

inline std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

template <typename U>
void put_le(std::vector<std::uint8_t>& out, std::size_t at, U value) {
    for (std::size_t b = 0; b < sizeof(U); ++b) out[at + b] = static_cast<std::uint8_t>(value >> (8 * b));
}

template <typename U>
U get_le(const std::uint8_t* p) {
    U v = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(p[b]) << (8 * b);
    return v;
}

inline void encode_tensor(const Tensor& t, std::vector<std::uint8_t>& out, std::size_t at) {
    const std::size_t w = dtype_size(t.dtype());
    for (std::size_t i = 0; i < t.numel(); ++i) {
        const double v = t[i];
        switch (t.dtype()) {
            case DType::F64: put_le(out, at + i * w, std::bit_cast<std::uint64_t>(v)); break;
            case DType::F32: put_le(out, at + i * w, std::bit_cast<std::uint32_t>(static_cast<float>(v))); break;
            case DType::U32: put_le(out, at + i * w, static_cast<std::uint32_t>(v)); break;
        }
    }
}

inline std::vector<double> decode_tensor(const std::uint8_t* p, DType dt, std::size_t n) {
    std::vector<double> v(n);
    const std::size_t w = dtype_size(dt);
    for (std::size_t i = 0; i < n; ++i) {
        switch (dt) {
            case DType::F64: v[i] = std::bit_cast<double>(get_le<std::uint64_t>(p + i * w)); break;
            case DType::F32: v[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + i * w)); break;
            case DType::U32: v[i] = get_le<std::uint32_t>(p + i * w); break;
        }
    }
    return v;
}

inline void validate_entry(const Entry& e) {
    try {
        check_kind_rank(e.name, e.kind, e.tensor);
    } catch (const std::invalid_argument& ex) {
        throw ContainerError(ContainerErrc::Invariant, ex.what());
    }
    for (double v : e.tensor.values()) {
        if (!std::isfinite(v)) throw ContainerError(ContainerErrc::NonFinite, "tensor '" + e.name + "' has non-finite value");
        if (e.tensor.dtype() == DType::U32 &&
            (v < 0 || v > std::numeric_limits<std::uint32_t>::max() || v != std::floor(v)))
            throw ContainerError(ContainerErrc::Invariant, "tensor '" + e.name + "' is u32 but holds " + std::to_string(v));
    }
}

}  // namespace detail

/// Serialize to bytes. Validates every entry before producing output.
inline std::vector<std::uint8_t> encode_container(const Checkpoint& ckpt) {
    using nlohmann::ordered_json;
    for (const auto& e : ckpt.entries()) detail::validate_entry(e);

    ordered_json header;
    header["version"] = 1;
    header["tensors"] = ordered_json::array();
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (const auto& e : ckpt.entries()) {
        const std::size_t nbytes = e.tensor.numel() * dtype_size(e.tensor.dtype());
        ordered_json t;
        t["name"] = e.name;
        t["kind"] = kind_name(e.kind);
        t["dtype"] = dtype_name(e.tensor.dtype());
        t["shape"] = e.tensor.shape();
        t["offset"] = offset;
        t["nbytes"] = nbytes;
        header["tensors"].push_back(std::move(t));
        offsets.push_back(offset);
        offset = detail::align_up(offset + nbytes);
    }
    header["meta"] = ordered_json::object();
    for (const auto& [k, v] : ckpt.meta()) header["meta"][k] = v;

    std::string text = header.dump();
    text.resize(detail::align_up(8 + text.size()) - 8, ' ');
    if (text.size() > std::numeric_limits<std::uint32_t>::max())
        throw ContainerError(ContainerErrc::Invariant, "header too large");

    std::size_t payload = 0;
    if (!ckpt.empty()) {
        const auto& last = ckpt.entries().back();
        payload = offsets.back() + last.tensor.numel() * dtype_size(last.tensor.dtype());
    }
    std::vector<std::uint8_t> out(8 + text.size() + payload, 0);
    std::memcpy(out.data(), detail::kMagic, 4);
    detail::put_le(out, 4, static_cast<std::uint32_t>(text.size()));
    std::memcpy(out.data() + 8, text.data(), text.size());
    const std::size_t base = 8 + text.size();
    for (std::size_t i = 0; i < ckpt.size(); ++i) detail::encode_tensor(ckpt.entries()[i].tensor, out, base + offsets[i]);
    return out;
}

inline Checkpoint decode_container(const std::vector<std::uint8_t>& bytes) {
    using nlohmann::json;
    if (bytes.size() < 8) throw ContainerError(ContainerErrc::Truncated, "file shorter than the 8-byte preamble");
    if (std::memcmp(bytes.data(), detail::kMagic, 4) != 0) throw ContainerError(ContainerErrc::BadMagic, "expected magic 'MTC1'");
    const std::size_t hlen = detail::get_le<std::uint32_t>(bytes.data() + 4);
    if (8 + hlen > bytes.size()) throw ContainerError(ContainerErrc::Truncated, "header extends past end of file");

    json header;
    try {
        header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const json::exception& ex) {
        throw ContainerError(ContainerErrc::BadHeader, std::string("header is not valid JSON: ") + ex.what());
    }

    const std::size_t base = 8 + hlen;
    const std::size_t payload = bytes.size() - base;
    Checkpoint out;
    try {
        if (!header.is_object() || header.value("version", 0) != 1)
            throw ContainerError(ContainerErrc::BadHeader, "missing or unsupported version");
        if (!header.contains("tensors") || !header["tensors"].is_array())
            throw ContainerError(ContainerErrc::BadHeader, "missing tensor table");

        std::size_t prev_end = 0;
        bool first = true;
        for (const auto& t : header["tensors"]) {
            const auto name = t.at("name").get<std::string>();
            const auto dtype = parse_dtype(t.at("dtype").get<std::string>());
            const auto kind = parse_kind(t.at("kind").get<std::string>());
            const auto shape = t.at("shape").get<Shape>();
            const auto offset = t.at("offset").get<std::size_t>();
            const auto nbytes = t.at("nbytes").get<std::size_t>();
            if (shape.empty()) throw ContainerError(ContainerErrc::BadHeader, "'" + name + "' has empty shape");
            for (auto d : shape)
                if (d == 0) throw ContainerError(ContainerErrc::BadHeader, "'" + name + "' has a zero dimension");
            if (nbytes != shape_numel(shape) * dtype_size(dtype))
                throw ContainerError(ContainerErrc::SizeMismatch, "'" + name + "' nbytes " + std::to_string(nbytes) +
                                                                     " != product(shape) * sizeof(dtype)");
            if (offset % detail::kAlign != 0)
                throw ContainerError(ContainerErrc::Misaligned, "'" + name + "' offset " + std::to_string(offset));
            if (!first && offset < prev_end)
                throw ContainerError(ContainerErrc::Overlap, "'" + name + "' starts at " + std::to_string(offset) +
                                                                " before previous tensor ends at " + std::to_string(prev_end));
            if (offset + nbytes > payload)
                throw ContainerError(ContainerErrc::Truncated, "'" + name + "' needs payload bytes up to " +
                                                                  std::to_string(offset + nbytes) + ", have " +
                                                                  std::to_string(payload));
            first = false;
            prev_end = offset + nbytes;

            auto values = detail::decode_tensor(bytes.data() + base + offset, dtype, shape_numel(shape));
            for (double v : values)
                if (!std::isfinite(v)) throw ContainerError(ContainerErrc::NonFinite, "tensor '" + name + "' has non-finite value");
            Tensor tensor(shape, std::move(values), dtype);
            try {
                out.add(name, kind, std::move(tensor));
            } catch (const std::invalid_argument& ex) {
                throw ContainerError(ContainerErrc::Invariant, ex.what());
            }
        }
        if (header.contains("meta")) {
            for (const auto& [k, v] : header["meta"].items()) out.meta()[k] = v.get<std::string>();
        }
    } catch (const json::exception& ex) {
        throw ContainerError(ContainerErrc::BadHeader, ex.what());
    } catch (const std::invalid_argument& ex) {
        throw ContainerError(ContainerErrc::BadHeader, ex.what());
    }
    return out;
}

inline void write_container(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = encode_container(ckpt);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ContainerError(ContainerErrc::Io, "cannot open '" + path.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ContainerError(ContainerErrc::Io, "write failed for '" + path.string() + "'");
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ContainerError(ContainerErrc::Io, "cannot open '" + path.string() + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline Checkpoint read_container(const std::filesystem::path& path) {
    return decode_container(read_file_bytes(path));
}

/// 64-bit FNV-1a over raw bytes; used for tensor checksums and file digests.
inline std::uint64_t fnv1a64(const std::uint8_t* p, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

/// Checksum of a tensor's little-endian encoded bytes.
inline std::string tensor_checksum(const Tensor& t) {
    std::vector<std::uint8_t> buf(t.numel() * dtype_size(t.dtype()));
    detail::encode_tensor(t, buf, 0);
    return hex64(fnv1a64(buf.data(), buf.size()));
}

inline std::string file_digest(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

}  // namespace catmerge
