#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dact/tensor.hpp"

namespace dact {

// Checkpoint container:
//   magic "DACT" | version u32 | records... | crc32 u32 (of all record bytes)
// Record: name (u32 len + bytes) | dtype u32 | rank u32 | dims i64[rank] | raw LE data.
// The first record is named "__meta__" (dtype Bytes) and holds a JSON header
// with the model config and run state.
//
// All multi-byte values are little-endian.

enum class Dtype : uint32_t { F32 = 1, F64 = 2, Bytes = 3 };

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckpointRecord {
    std::string name;
    Dtype dtype;
    Shape shape;
    std::vector<unsigned char> raw;  // little-endian payload

    int64_t numel() const { return shape_numel(shape); }

    template <class Real>
    std::vector<Real> as() const {
        std::vector<Real> out(static_cast<size_t>(numel()));
        if (dtype == Dtype::F32) {
            if (raw.size() != out.size() * 4) throw CheckpointError("record size mismatch: " + name);
            for (size_t i = 0; i < out.size(); ++i) {
                float f;
                std::memcpy(&f, raw.data() + i * 4, 4);
                out[i] = static_cast<Real>(f);
            }
        } else if (dtype == Dtype::F64) {
            if (raw.size() != out.size() * 8) throw CheckpointError("record size mismatch: " + name);
            for (size_t i = 0; i < out.size(); ++i) {
                double d;
                std::memcpy(&d, raw.data() + i * 8, 8);
                out[i] = static_cast<Real>(d);
            }
        } else {
            throw CheckpointError("record " + name + " is not numeric");
        }
        return out;
    }
};

namespace detail {

inline void put_u32(std::vector<unsigned char>& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline void put_i64(std::vector<unsigned char>& buf, int64_t v) {
    auto u = static_cast<uint64_t>(v);
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>((u >> (8 * i)) & 0xff));
}

struct Reader {
    const std::vector<unsigned char>& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw CheckpointError("truncated checkpoint");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + static_cast<size_t>(i)]) << (8 * i);
        pos += 4;
        return v;
    }
    int64_t i64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[pos + static_cast<size_t>(i)]) << (8 * i);
        pos += 8;
        return static_cast<int64_t>(v);
    }
    std::vector<unsigned char> bytes(size_t n) {
        need(n);
        std::vector<unsigned char> out(buf.begin() + static_cast<long>(pos), buf.begin() + static_cast<long>(pos + n));
        pos += n;
        return out;
    }
};

}  // namespace detail

class CheckpointWriter {
public:
    void add_bytes(const std::string& name, const std::string& data) {
        begin_record(name, Dtype::Bytes, {static_cast<int64_t>(data.size())});
        payload_.insert(payload_.end(), data.begin(), data.end());
    }

    template <class Real>
    void add_tensor(const std::string& name, const Shape& shape, const std::vector<Real>& data) {
        static_assert(std::is_same_v<Real, float> || std::is_same_v<Real, double>);
        const Dtype dt = std::is_same_v<Real, float> ? Dtype::F32 : Dtype::F64;
        begin_record(name, dt, shape);
        const size_t w = sizeof(Real);
        const size_t off = payload_.size();
        payload_.resize(off + data.size() * w);
        std::memcpy(payload_.data() + off, data.data(), data.size() * w);
    }

    void write(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw CheckpointError("cannot open for write: " + path);
        out.write("DACT", 4);
        std::vector<unsigned char> ver;
        detail::put_u32(ver, kVersion);
        out.write(reinterpret_cast<const char*>(ver.data()), 4);
        out.write(reinterpret_cast<const char*>(payload_.data()), static_cast<std::streamsize>(payload_.size()));
        const auto crc = static_cast<uint32_t>(
            crc32(0, reinterpret_cast<const Bytef*>(payload_.data()), static_cast<uInt>(payload_.size())));
        std::vector<unsigned char> tail;
        detail::put_u32(tail, crc);
        out.write(reinterpret_cast<const char*>(tail.data()), 4);
        if (!out) throw CheckpointError("write failed: " + path);
    }

    static constexpr uint32_t kVersion = 1;

private:
    void begin_record(const std::string& name, Dtype dt, const Shape& shape) {
        detail::put_u32(payload_, static_cast<uint32_t>(name.size()));
        payload_.insert(payload_.end(), name.begin(), name.end());
        detail::put_u32(payload_, static_cast<uint32_t>(dt));
        detail::put_u32(payload_, static_cast<uint32_t>(shape.size()));
        for (int64_t d : shape) detail::put_i64(payload_, d);
    }

    std::vector<unsigned char> payload_;
};

inline std::map<std::string, CheckpointRecord> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open: " + path);
    std::vector<unsigned char> all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (all.size() < 12) throw CheckpointError("file too small: " + path);
    if (std::memcmp(all.data(), "DACT", 4) != 0) throw CheckpointError("bad magic: " + path);

    detail::Reader rd{all, 4};
    const uint32_t version = rd.u32();
    if (version != CheckpointWriter::kVersion)
        throw CheckpointError("unsupported version " + std::to_string(version));

    const size_t payload_end = all.size() - 4;
    const auto expect_crc = [&] {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(all[payload_end + static_cast<size_t>(i)]) << (8 * i);
        return v;
    }();
    const auto actual_crc = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(all.data() + 8), static_cast<uInt>(payload_end - 8)));
    if (expect_crc != actual_crc) throw CheckpointError("crc mismatch (corrupt checkpoint): " + path);

    std::map<std::string, CheckpointRecord> records;
    while (rd.pos < payload_end) {
        CheckpointRecord rec;
        const uint32_t name_len = rd.u32();
        auto name_bytes = rd.bytes(name_len);
        rec.name.assign(name_bytes.begin(), name_bytes.end());
        const uint32_t dt = rd.u32();
        if (dt < 1 || dt > 3) throw CheckpointError("bad dtype in record " + rec.name);
        rec.dtype = static_cast<Dtype>(dt);
        const uint32_t rank = rd.u32();
        for (uint32_t i = 0; i < rank; ++i) rec.shape.push_back(rd.i64());
        const size_t width = rec.dtype == Dtype::F32 ? 4 : rec.dtype == Dtype::F64 ? 8 : 1;
        rec.raw = rd.bytes(static_cast<size_t>(shape_numel(rec.shape)) * width);
        if (rd.pos > payload_end) throw CheckpointError("record overruns payload: " + rec.name);
        records.emplace(rec.name, std::move(rec));
    }
    return records;
}

}  // namespace dact
