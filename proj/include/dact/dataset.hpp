#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dact/action.hpp"
#include "dact/simulator.hpp"

namespace dact {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Frame {
    std::vector<double> obs;
    ActionVector action;
    int64_t t = 0;
};

struct Episode {
    std::vector<Frame> frames;
    int task_id = 0;
    std::string source_id;
};

// Exact per-dimension action moments (population convention) plus the
// normalization bounds and the per-step 6D std scalar driving the ensemble
// window rule.
struct DatasetStats {
    std::array<double, 7> min{}, max{}, mean{}, std{};
    std::array<double, 7> q01{}, q99{};  // 1st/99th percentile bounds
    double six_d_std = 0;                // mean of the six continuous per-dim stds
    int64_t action_count = 0;

    NLOHMANN_DEFINE_TYPE_INTRUSIVE(DatasetStats, min, max, mean, std, q01, q99, six_d_std, action_count)
};

inline DatasetStats compute_stats(const std::vector<Episode>& episodes) {
    std::array<std::vector<double>, 7> values;
    for (const auto& ep : episodes)
        for (const auto& f : ep.frames)
            for (int d = 0; d < 7; ++d) values[static_cast<size_t>(d)].push_back(f.action[d]);
    if (values[0].empty()) throw DataError("compute_stats: empty dataset");

    DatasetStats s;
    s.action_count = static_cast<int64_t>(values[0].size());
    const auto n = static_cast<double>(s.action_count);
    for (int d = 0; d < 7; ++d) {
        auto& v = values[static_cast<size_t>(d)];
        double sum = 0;
        for (double x : v) sum += x;
        const double mean = sum / n;
        double var = 0;
        for (double x : v) var += (x - mean) * (x - mean);
        var /= n;  // population convention; the window rule depends on it
        s.mean[static_cast<size_t>(d)] = mean;
        s.std[static_cast<size_t>(d)] = std::sqrt(var);
        std::sort(v.begin(), v.end());
        s.min[static_cast<size_t>(d)] = v.front();
        s.max[static_cast<size_t>(d)] = v.back();
        const auto pick = [&](double p) {
            const auto idx = static_cast<size_t>(std::llround(p * (n - 1)));
            return v[std::min(idx, v.size() - 1)];
        };
        s.q01[static_cast<size_t>(d)] = pick(0.01);
        s.q99[static_cast<size_t>(d)] = pick(0.99);
    }
    double acc = 0;
    for (int d = 0; d < 6; ++d) acc += s.std[static_cast<size_t>(d)];
    s.six_d_std = acc / 6.0;
    return s;
}

enum class NormMode { Quantile, MinMax };

inline const char* norm_mode_name(NormMode m) { return m == NormMode::Quantile ? "quantile" : "minmax"; }
inline NormMode norm_mode_from_name(const std::string& s) {
    if (s == "quantile") return NormMode::Quantile;
    if (s == "minmax") return NormMode::MinMax;
    throw std::invalid_argument("unknown normalization mode: " + s);
}

// Per-dimension affine map of the 6 continuous dims onto [-1,1] with
// clipping; the gripper maps {0,1} -> {-1,1}. Degenerate dims map to 0.
class Normalizer {
public:
    Normalizer() {
        lo_.fill(0);
        hi_.fill(0);
    }

    Normalizer(const DatasetStats& stats, NormMode mode) {
        for (int d = 0; d < 6; ++d) {
            lo_[static_cast<size_t>(d)] = mode == NormMode::Quantile ? stats.q01[static_cast<size_t>(d)]
                                                                     : stats.min[static_cast<size_t>(d)];
            hi_[static_cast<size_t>(d)] = mode == NormMode::Quantile ? stats.q99[static_cast<size_t>(d)]
                                                                     : stats.max[static_cast<size_t>(d)];
        }
    }

    ActionVector normalize(const ActionVector& a) const {
        ActionVector out;
        for (int d = 0; d < 6; ++d) {
            const double lo = lo_[static_cast<size_t>(d)], hi = hi_[static_cast<size_t>(d)];
            if (hi <= lo) {
                out[d] = 0.0;
            } else {
                const double y = 2.0 * (a[d] - lo) / (hi - lo) - 1.0;
                out[d] = std::min(1.0, std::max(-1.0, y));
            }
        }
        out.gripper = a.gripper >= 0.5 ? 1.0 : -1.0;
        return out;
    }

    ActionVector denormalize(const ActionVector& a) const {
        ActionVector out;
        for (int d = 0; d < 6; ++d) {
            const double lo = lo_[static_cast<size_t>(d)], hi = hi_[static_cast<size_t>(d)];
            out[d] = hi <= lo ? lo : (a[d] + 1.0) / 2.0 * (hi - lo) + lo;
        }
        out.gripper = a.gripper > 0.0 ? 1.0 : 0.0;
        return out;
    }

    const std::array<double, 6>& lo() const { return lo_; }
    const std::array<double, 6>& hi() const { return hi_; }

private:
    std::array<double, 6> lo_{}, hi_{};
};

// Training window at frame t: the observation plus actions a_t .. a_{t+N}.
// Indices past the episode end are filled with the stationary action: zero
// deltas, gripper repeated from the last real frame.
struct Window {
    const Frame* obs_frame = nullptr;
    ActionSequence actions;  // length N+1, raw (unnormalized) units
};

inline Window window(const Episode& ep, int64_t t, int n_future) {
    if (ep.frames.empty()) throw DataError("window: empty episode");
    if (t < 0 || t >= static_cast<int64_t>(ep.frames.size()))
        throw DataError("window: frame index " + std::to_string(t) + " out of range");
    Window w;
    w.obs_frame = &ep.frames[static_cast<size_t>(t)];
    w.actions.resize(static_cast<size_t>(n_future) + 1);
    const double last_gripper = ep.frames.back().action.gripper;
    for (int i = 0; i <= n_future; ++i) {
        const int64_t idx = t + i;
        if (idx < static_cast<int64_t>(ep.frames.size())) {
            w.actions[static_cast<size_t>(i)] = ep.frames[static_cast<size_t>(idx)].action;
        } else {
            ActionVector pad;  // stationary: zero deltas
            pad.gripper = last_gripper;
            w.actions[static_cast<size_t>(i)] = pad;
        }
    }
    return w;
}

// ---------------------------------------------------------------------------
// on-disk layout: <dir>/manifest.json + <dir>/episodes.bin
// episodes.bin: per episode a u32 length prefix followed by
//   u32 task_id | u32 source_len | bytes | u32 frame_count | u32 obs_width |
//   frames (i64 t, obs f64[obs_width], action f64[7]), all little-endian.
// ---------------------------------------------------------------------------

struct Dataset {
    std::vector<Episode> episodes;
    DatasetStats stats;
    NormMode norm_mode = NormMode::Quantile;
    nlohmann::json manifest;

    int64_t total_frames() const {
        int64_t n = 0;
        for (const auto& ep : episodes) n += static_cast<int64_t>(ep.frames.size());
        return n;
    }

    Normalizer normalizer() const { return Normalizer(stats, norm_mode); }
};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_i64(std::string& out, int64_t v) {
    const auto u = static_cast<uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double v) {
    uint64_t u;
    std::memcpy(&u, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

struct ByteReader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw DataError("truncated episode record");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + static_cast<size_t>(i)])) << (8 * i);
        pos += 4;
        return v;
    }
    int64_t i64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + static_cast<size_t>(i)])) << (8 * i);
        pos += 8;
        return static_cast<int64_t>(v);
    }
    double f64() {
        const auto u = static_cast<uint64_t>(i64());
        double d;
        std::memcpy(&d, &u, 8);
        return d;
    }
    std::string str(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

inline std::string encode_episode(const Episode& ep) {
    std::string body;
    put_u32(body, static_cast<uint32_t>(ep.task_id));
    put_u32(body, static_cast<uint32_t>(ep.source_id.size()));
    body += ep.source_id;
    put_u32(body, static_cast<uint32_t>(ep.frames.size()));
    const uint32_t obs_width = ep.frames.empty() ? 0 : static_cast<uint32_t>(ep.frames[0].obs.size());
    put_u32(body, obs_width);
    for (const auto& f : ep.frames) {
        if (f.obs.size() != obs_width) throw DataError("encode_episode: ragged observation widths");
        put_i64(body, f.t);
        for (double v : f.obs) put_f64(body, v);
        for (int d = 0; d < 7; ++d) put_f64(body, f.action[d]);
    }
    return body;
}

inline Episode decode_episode(const std::string& body) {
    ByteReader rd{body};
    Episode ep;
    ep.task_id = static_cast<int>(rd.u32());
    const uint32_t src_len = rd.u32();
    ep.source_id = rd.str(src_len);
    const uint32_t frames = rd.u32();
    const uint32_t obs_width = rd.u32();
    ep.frames.resize(frames);
    for (auto& f : ep.frames) {
        f.t = rd.i64();
        f.obs.resize(obs_width);
        for (auto& v : f.obs) v = rd.f64();
        for (int d = 0; d < 7; ++d) f.action[d] = rd.f64();
    }
    return ep;
}

}  // namespace detail

constexpr int kDatasetSchemaVersion = 1;

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    std::ofstream bin(fs::path(dir) / "episodes.bin", std::ios::binary);
    if (!bin) throw DataError("cannot write episodes.bin in " + dir);
    for (const auto& ep : ds.episodes) {
        const std::string body = detail::encode_episode(ep);
        std::string len;
        detail::put_u32(len, static_cast<uint32_t>(body.size()));
        bin << len << body;
    }
    if (!bin) throw DataError("write failed: episodes.bin");
    bin.close();

    nlohmann::json manifest = ds.manifest;
    manifest["schema_version"] = kDatasetSchemaVersion;
    manifest["episode_count"] = ds.episodes.size();
    manifest["frame_count"] = ds.total_frames();
    manifest["stats"] = ds.stats;
    manifest["norm_mode"] = norm_mode_name(ds.norm_mode);
    std::map<std::string, int> task_counts;
    for (const auto& ep : ds.episodes) task_counts[task_name(static_cast<Task>(ep.task_id))] += 1;
    manifest["task_counts"] = task_counts;

    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw DataError("cannot write manifest.json in " + dir);
    mf << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    Dataset ds;

    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw DataError("cannot open manifest.json in " + dir);
    ds.manifest = nlohmann::json::parse(mf);
    if (ds.manifest.at("schema_version").get<int>() != kDatasetSchemaVersion)
        throw DataError("unsupported dataset schema version");
    ds.stats = ds.manifest.at("stats").get<DatasetStats>();
    ds.norm_mode = norm_mode_from_name(ds.manifest.at("norm_mode").get<std::string>());

    std::ifstream bin(fs::path(dir) / "episodes.bin", std::ios::binary);
    if (!bin) throw DataError("cannot open episodes.bin in " + dir);
    std::string all((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    size_t pos = 0;
    while (pos + 4 <= all.size()) {
        uint32_t len = 0;
        for (int i = 0; i < 4; ++i) len |= static_cast<uint32_t>(static_cast<unsigned char>(all[pos + static_cast<size_t>(i)])) << (8 * i);
        pos += 4;
        if (pos + len > all.size()) throw DataError("truncated episodes.bin");
        ds.episodes.push_back(detail::decode_episode(all.substr(pos, len)));
        pos += len;
    }
    if (pos != all.size()) throw DataError("trailing bytes in episodes.bin");

    const auto expect = ds.manifest.at("episode_count").get<size_t>();
    if (ds.episodes.size() != expect)
        throw DataError("episode count mismatch: manifest says " + std::to_string(expect) + ", file has " +
                        std::to_string(ds.episodes.size()));
    return ds;
}

}  // namespace dact
