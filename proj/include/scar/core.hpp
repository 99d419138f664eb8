#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scar/common.hpp"

namespace scar {

struct Bbox {
    std::array<float, 3> min{0, 0, 0};
    std::array<float, 3> max{0, 0, 0};

    float extent(int axis) const { return max[axis] - min[axis]; }

    bool contains(float x, float y, float z) const {
        return x >= min[0] && x <= max[0] && y >= min[1] && y <= max[1] && z >= min[2] &&
               z <= max[2];
    }
};

// Sparse anchors: world positions plus a D-dimensional latent feature per
// anchor. This is the codec payload; offsets/scalings of the full scene
// representation are out of scope.
struct AnchorCloud {
    MatXf positions;  // N x 3
    MatXf features;   // N x D
    Bbox bbox;

    Eigen::Index count() const { return positions.rows(); }
    Eigen::Index dim() const { return features.cols(); }

    static AnchorCloud make(MatXf positions, MatXf features) {
        AnchorCloud c;
        c.positions = std::move(positions);
        c.features = std::move(features);
        if (c.positions.rows() < 1 || c.features.cols() < 1)
            throw DataError("anchor cloud requires N >= 1 and D >= 1");
        if (c.positions.rows() != c.features.rows())
            throw DataError("positions/features row count mismatch");
        if (!c.positions.allFinite() || !c.features.allFinite())
            throw DataError("anchor cloud contains non-finite values");
        for (int a = 0; a < 3; ++a) {
            c.bbox.min[a] = c.positions.col(a).minCoeff();
            c.bbox.max[a] = c.positions.col(a).maxCoeff();
        }
        return c;
    }
};

struct GridConfig {
    int levels = 8;
    uint32_t base_resolution = 16;
    uint32_t max_resolution = 512;
    uint32_t table_size = 1u << 14;  // power of two
    int features_per_level = 4;

    int embed_dim() const { return levels * features_per_level; }

    void validate() const {
        if (levels < 1) throw ConfigError("grid.levels must be >= 1");
        if (features_per_level < 1) throw ConfigError("grid.features_per_level must be >= 1");
        if (base_resolution < 1 || max_resolution < base_resolution)
            throw ConfigError("grid resolutions must satisfy 1 <= base <= max");
        if (table_size == 0 || (table_size & (table_size - 1)) != 0)
            throw ConfigError("grid.table_size must be a power of two");
    }
};

struct EntropyConfig {
    int hidden = 64;       // GRU hidden width, 2 layers
    int embed = 32;        // index embedding width
    int d_model = 64;      // attention projection width
    int head_hidden = 128; // head MLP hidden width
    std::string arch = "gru-attn";

    void validate() const {
        if (hidden < 1 || embed < 1 || d_model < 1 || head_hidden < 1)
            throw ConfigError("entropy model sizes must be positive");
        if (arch != "mlp" && arch != "branched-mlp" && arch != "gru" && arch != "gru-attn")
            throw ConfigError("unknown entropy architecture tag: " + arch);
    }
};

struct TrainConfig {
    double lr = 1e-3;
    int batch = 256;
    uint64_t t_start = 10000;       // end of continuous warm-up
    uint64_t t_end = 30000;         // end of soft-quantization blend
    uint64_t total_steps = 40000;   // end of hard-quantization phase
    double noise_amp = 1e-2;        // warm-up feature noise amplitude
    double finetune_fraction = 0.25;  // tail of phase 3 trained against the binarized grid

    void validate() const {
        if (!(t_start < t_end)) throw ConfigError("t_start must be < t_end");
        if (total_steps < t_end) throw ConfigError("total_steps must be >= t_end");
        if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0");
        if (batch < 1) throw ConfigError("batch must be >= 1");
        if (!(noise_amp >= 0.0)) throw ConfigError("noise_amp must be >= 0");
        if (finetune_fraction < 0.0 || finetune_fraction > 1.0)
            throw ConfigError("finetune_fraction must lie in [0,1]");
    }
};

struct CodecConfig {
    // Scene generation.
    uint64_t n_anchors = 2000;
    int feature_dim = 16;
    double smoothness = 0.9;

    // Quantizer.
    int stages = 4;            // M
    uint32_t k_base = 1024;    // coarse codebook entries
    uint32_t k_res = 1024;     // shared residual codebook entries
    int codebook_epochs = 24;
    double lambda_commit = 0.25;

    GridConfig grid;
    EntropyConfig entropy;
    TrainConfig train;

    double rate_weight = 1.0;
    std::vector<double> mask_fractions;  // per-layer active fraction; empty = default schedule
    uint8_t compressor = 1;              // 0 = store, 1 = deflate
    uint64_t seed = 0;

    void validate() const {
        if (n_anchors < 1) throw ConfigError("n_anchors must be >= 1");
        if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
        if (!(smoothness > 0.0 && smoothness <= 1.0))
            throw ConfigError("smoothness must lie in (0,1]");
        if (stages < 1) throw ConfigError("stages must be >= 1");
        if (k_base < 2 || k_res < 2) throw ConfigError("codebook sizes must be >= 2");
        if (k_base >= (1u << 15) || k_res >= (1u << 15))
            throw ConfigError("codebook sizes must stay below 2^15 (16-bit coder frequencies)");
        if (codebook_epochs < 1) throw ConfigError("codebook_epochs must be >= 1");
        if (!(lambda_commit >= 0.0)) throw ConfigError("lambda_commit must be >= 0");
        if (!(rate_weight >= 0.0)) throw ConfigError("rate_weight must be >= 0");
        if (compressor > 1) throw ConfigError("compressor id must be 0 or 1");
        if (!mask_fractions.empty()) {
            if (static_cast<int>(mask_fractions.size()) != stages)
                throw ConfigError("mask_fractions must have one entry per stage");
            double prev = 0.0;
            for (double f : mask_fractions) {
                if (!(f > 0.0 && f <= 1.0) || f < prev)
                    throw ConfigError("mask_fractions must be non-decreasing in (0,1]");
                prev = f;
            }
            if (mask_fractions.back() != 1.0)
                throw ConfigError("final mask fraction must be 1.0");
        }
        grid.validate();
        entropy.validate();
        train.validate();
    }

    // Active-anchor fraction per layer. Default: the (0.6, 0.75, 0.9, 1.0)
    // schedule at M=4, a linear ramp to 1.0 otherwise.
    std::vector<double> layer_fractions() const {
        if (!mask_fractions.empty()) return mask_fractions;
        if (stages == 1) return {1.0};
        if (stages == 4) return {0.6, 0.75, 0.9, 1.0};
        std::vector<double> f(stages);
        for (int m = 0; m < stages; ++m)
            f[m] = 0.6 + 0.4 * static_cast<double>(m) / static_cast<double>(stages - 1);
        f.back() = 1.0;
        return f;
    }

    // Minutes-scale CPU configuration used by the CLI defaults and tests.
    static CodecConfig desk_scale() {
        CodecConfig c;
        c.n_anchors = 2000;
        c.feature_dim = 16;
        c.smoothness = 0.9;
        c.stages = 4;
        c.k_base = 256;
        c.k_res = 256;
        c.codebook_epochs = 24;
        c.grid.levels = 4;
        c.grid.base_resolution = 16;
        c.grid.max_resolution = 128;
        c.grid.table_size = 1u << 14;
        c.grid.features_per_level = 4;
        c.entropy.hidden = 48;
        c.entropy.embed = 24;
        c.entropy.d_model = 48;
        c.train.t_start = 24;
        c.train.t_end = 64;
        c.train.total_steps = 240;
        c.train.batch = 256;
        c.seed = 7;
        return c;
    }
};

inline nlohmann::json config_to_json(const CodecConfig& c) {
    nlohmann::json j;
    j["n_anchors"] = c.n_anchors;
    j["feature_dim"] = c.feature_dim;
    j["smoothness"] = c.smoothness;
    j["stages"] = c.stages;
    j["k_base"] = c.k_base;
    j["k_res"] = c.k_res;
    j["codebook_epochs"] = c.codebook_epochs;
    j["lambda_commit"] = c.lambda_commit;
    j["grid"] = {{"levels", c.grid.levels},
                 {"base_resolution", c.grid.base_resolution},
                 {"max_resolution", c.grid.max_resolution},
                 {"table_size", c.grid.table_size},
                 {"features_per_level", c.grid.features_per_level}};
    j["entropy"] = {{"hidden", c.entropy.hidden},
                    {"embed", c.entropy.embed},
                    {"d_model", c.entropy.d_model},
                    {"head_hidden", c.entropy.head_hidden},
                    {"arch", c.entropy.arch}};
    j["train"] = {{"lr", c.train.lr},
                  {"batch", c.train.batch},
                  {"t_start", c.train.t_start},
                  {"t_end", c.train.t_end},
                  {"total_steps", c.train.total_steps},
                  {"noise_amp", c.train.noise_amp},
                  {"finetune_fraction", c.train.finetune_fraction}};
    j["rate_weight"] = c.rate_weight;
    if (!c.mask_fractions.empty()) j["mask_fractions"] = c.mask_fractions;
    j["compressor"] = c.compressor;
    j["seed"] = c.seed;
    return j;
}

inline CodecConfig config_from_json(const nlohmann::json& j) {
    CodecConfig c = CodecConfig::desk_scale();
    try {
        if (j.contains("n_anchors")) c.n_anchors = j.at("n_anchors").get<uint64_t>();
        if (j.contains("feature_dim")) c.feature_dim = j.at("feature_dim").get<int>();
        if (j.contains("smoothness")) c.smoothness = j.at("smoothness").get<double>();
        if (j.contains("stages")) c.stages = j.at("stages").get<int>();
        if (j.contains("k_base")) c.k_base = j.at("k_base").get<uint32_t>();
        if (j.contains("k_res")) c.k_res = j.at("k_res").get<uint32_t>();
        if (j.contains("codebook_epochs")) c.codebook_epochs = j.at("codebook_epochs").get<int>();
        if (j.contains("lambda_commit")) c.lambda_commit = j.at("lambda_commit").get<double>();
        if (j.contains("grid")) {
            const auto& g = j.at("grid");
            if (g.contains("levels")) c.grid.levels = g.at("levels").get<int>();
            if (g.contains("base_resolution"))
                c.grid.base_resolution = g.at("base_resolution").get<uint32_t>();
            if (g.contains("max_resolution"))
                c.grid.max_resolution = g.at("max_resolution").get<uint32_t>();
            if (g.contains("table_size")) c.grid.table_size = g.at("table_size").get<uint32_t>();
            if (g.contains("features_per_level"))
                c.grid.features_per_level = g.at("features_per_level").get<int>();
        }
        if (j.contains("entropy")) {
            const auto& e = j.at("entropy");
            if (e.contains("hidden")) c.entropy.hidden = e.at("hidden").get<int>();
            if (e.contains("embed")) c.entropy.embed = e.at("embed").get<int>();
            if (e.contains("d_model")) c.entropy.d_model = e.at("d_model").get<int>();
            if (e.contains("head_hidden")) c.entropy.head_hidden = e.at("head_hidden").get<int>();
            if (e.contains("arch")) c.entropy.arch = e.at("arch").get<std::string>();
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            if (t.contains("lr")) c.train.lr = t.at("lr").get<double>();
            if (t.contains("batch")) c.train.batch = t.at("batch").get<int>();
            if (t.contains("t_start")) c.train.t_start = t.at("t_start").get<uint64_t>();
            if (t.contains("t_end")) c.train.t_end = t.at("t_end").get<uint64_t>();
            if (t.contains("total_steps")) c.train.total_steps = t.at("total_steps").get<uint64_t>();
            if (t.contains("noise_amp")) c.train.noise_amp = t.at("noise_amp").get<double>();
            if (t.contains("finetune_fraction"))
                c.train.finetune_fraction = t.at("finetune_fraction").get<double>();
        }
        if (j.contains("rate_weight")) c.rate_weight = j.at("rate_weight").get<double>();
        if (j.contains("mask_fractions"))
            c.mask_fractions = j.at("mask_fractions").get<std::vector<double>>();
        if (j.contains("compressor")) c.compressor = j.at("compressor").get<uint8_t>();
        if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad config json: ") + e.what());
    }
    c.validate();
    return c;
}

inline CodecConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return config_from_json(j);
}

// Warm-up factor of the soft-quantization phase: 0 before t_start, 1 after
// t_end, linear in between.
inline double curriculum_beta(uint64_t step, uint64_t t_start, uint64_t t_end) {
    if (t_start >= t_end) throw ConfigError("curriculum requires t_start < t_end");
    if (step <= t_start) return 0.0;
    if (step >= t_end) return 1.0;
    return static_cast<double>(step - t_start) / static_cast<double>(t_end - t_start);
}

// Value path of the soft-quantization blend: (1-beta)*f_cont + beta*f_q.
// Gradient contract (documented, not realized by autodiff here): the beta
// branch is sg[f_q + (f_cont - sg[f_cont])], so d(blend)/d(f_cont) = 1 and the
// quantized branch receives no gradient.
inline VecX blend_features(const VecX& f_cont, const VecX& f_q, double beta) {
    if (f_cont.size() != f_q.size()) throw DataError("blend_features: dimension mismatch");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("blend_features: beta must lie in [0,1]");
    if (beta == 0.0) return f_cont;
    if (beta == 1.0) return f_q;
    return (1.0 - beta) * f_cont + beta * f_q;
}

inline MatXf blend_features(const MatXf& f_cont, const MatXf& f_q, double beta) {
    if (f_cont.rows() != f_q.rows() || f_cont.cols() != f_q.cols())
        throw DataError("blend_features: dimension mismatch");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("blend_features: beta must lie in [0,1]");
    if (beta == 0.0) return f_cont;
    if (beta == 1.0) return f_q;
    float b = static_cast<float>(beta);
    return (1.0f - b) * f_cont + b * f_q;
}

// Synthetic anchor cloud with spatially correlated features: positions are
// uniform in the unit cube and each feature channel is a random band-limited
// field of position (32 sinusoids) plus small noise. Higher smoothness keeps
// the sinusoid frequencies low, so nearby anchors get similar features.
inline AnchorCloud generate_synthetic_cloud(uint64_t n, int d, double smoothness, Rng rng) {
    if (n < 1) throw ConfigError("generate_synthetic_cloud: n must be >= 1");
    if (d < 1) throw ConfigError("generate_synthetic_cloud: d must be >= 1");
    if (!(smoothness > 0.0 && smoothness <= 1.0))
        throw ConfigError("generate_synthetic_cloud: smoothness must lie in (0,1]");

    const int kWaves = 32;
    const double noise_amp = 0.01;
    // 1 cycle across the cube at smoothness 1, ~8 cycles near smoothness 0.
    const double max_freq = 1.0 + 7.0 * (1.0 - smoothness);

    MatXf positions(static_cast<Eigen::Index>(n), 3);
    for (Eigen::Index i = 0; i < positions.rows(); ++i)
        for (int a = 0; a < 3; ++a) positions(i, a) = static_cast<float>(rng.uniform());

    struct Wave {
        double kx, ky, kz, phase, amp;
    };
    std::vector<std::vector<Wave>> waves(static_cast<size_t>(d));
    const double amp_scale = 1.0 / std::sqrt(static_cast<double>(kWaves));
    for (int c = 0; c < d; ++c) {
        waves[c].resize(kWaves);
        for (int w = 0; w < kWaves; ++w) {
            // Random direction (normalized Gaussian) times a random frequency.
            double gx = rng.normal(), gy = rng.normal(), gz = rng.normal();
            double norm = std::sqrt(gx * gx + gy * gy + gz * gz);
            if (norm < 1e-12) norm = 1.0;
            double freq = rng.uniform(0.25, max_freq) * 2.0 * M_PI;
            waves[c][w] = {gx / norm * freq, gy / norm * freq, gz / norm * freq,
                           rng.uniform(0.0, 2.0 * M_PI), rng.normal() * amp_scale};
        }
    }

    MatXf features(static_cast<Eigen::Index>(n), d);
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        double x = positions(i, 0), y = positions(i, 1), z = positions(i, 2);
        for (int c = 0; c < d; ++c) {
            double v = 0.0;
            for (const Wave& w : waves[c]) v += w.amp * std::sin(w.kx * x + w.ky * y + w.kz * z + w.phase);
            features(i, c) = static_cast<float>(v);
        }
    }
    for (Eigen::Index i = 0; i < features.rows(); ++i)
        for (int c = 0; c < d; ++c) features(i, c) += static_cast<float>(noise_amp * rng.normal());

    return AnchorCloud::make(std::move(positions), std::move(features));
}

// ".anc" cloud file: magic "ANC1", N u64 LE, D u64 LE, N*3 f32 LE positions,
// N*D f32 LE features.
inline void save_cloud(const AnchorCloud& cloud, const std::string& path) {
    std::vector<uint8_t> out;
    out.reserve(20 + static_cast<size_t>(cloud.count()) * (3 + cloud.dim()) * 4);
    out.insert(out.end(), {'A', 'N', 'C', '1'});
    put_u64(out, static_cast<uint64_t>(cloud.count()));
    put_u64(out, static_cast<uint64_t>(cloud.dim()));
    for (Eigen::Index i = 0; i < cloud.count(); ++i)
        for (int a = 0; a < 3; ++a) put_f32(out, cloud.positions(i, a));
    for (Eigen::Index i = 0; i < cloud.count(); ++i)
        for (Eigen::Index c = 0; c < cloud.dim(); ++c) put_f32(out, cloud.features(i, c));
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("write failed: " + path);
}

inline AnchorCloud load_cloud(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open cloud file: " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    ByteReader r(buf);
    auto magic = r.bytes(4);
    if (std::string(magic.begin(), magic.end()) != "ANC1")
        throw DataError("not an anchor cloud file (bad magic): " + path);
    uint64_t n = r.u64();
    uint64_t d = r.u64();
    if (n < 1 || d < 1) throw DataError("cloud file with empty dimensions: " + path);
    MatXf positions(static_cast<Eigen::Index>(n), 3);
    MatXf features(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < positions.rows(); ++i)
        for (int a = 0; a < 3; ++a) positions(i, a) = r.f32();
    for (Eigen::Index i = 0; i < features.rows(); ++i)
        for (Eigen::Index c = 0; c < features.cols(); ++c) features(i, c) = r.f32();
    return AnchorCloud::make(std::move(positions), std::move(features));
}

}  // namespace scar
