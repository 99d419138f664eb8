#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "scar/common.hpp"
#include "scar/core.hpp"

namespace scar {

// Spatial hash of integer cell coordinates, instant-ngp style primes. Tables
// are power-of-two sized so the modulo is a mask.
inline uint32_t hash_index(uint32_t cx, uint32_t cy, uint32_t cz, uint32_t table_size) {
    uint32_t h = cx * 1u ^ cy * 2654435761u ^ cz * 805459861u;
    return h & (table_size - 1);
}

struct GridLevel {
    uint32_t resolution = 0;  // cells per axis; corner lattice is (res+1)^3
    bool dense = false;       // collision-free addressing when the lattice fits the table
    MatX table;               // rows x features_per_level

    uint32_t corner_index(uint32_t cx, uint32_t cy, uint32_t cz, uint32_t table_size) const {
        if (dense) {
            uint32_t side = resolution + 1;
            return cx + side * (cy + side * cz);
        }
        return hash_index(cx, cy, cz, table_size);
    }
};

// Which table rows a lookup touched and with what trilinear weight; used to
// route rate-loss gradients back into the tables.
struct GridLookupCache {
    struct Corner {
        uint32_t row;
        double weight;
    };
    // 8 corners per level.
    std::vector<std::array<Corner, 8>> per_level;
};

// Multi-resolution hashed feature grid over a bounding box. Lookup
// trilinearly interpolates the 8 surrounding corners per level and
// concatenates levels into one embedding of width levels*features_per_level.
struct SpatialGrid {
    GridConfig cfg;
    Bbox bbox;
    std::vector<GridLevel> levels;

    static std::vector<uint32_t> level_resolutions(const GridConfig& cfg) {
        std::vector<uint32_t> res(cfg.levels);
        if (cfg.levels == 1) {
            res[0] = cfg.base_resolution;
            return res;
        }
        double ratio = std::pow(static_cast<double>(cfg.max_resolution) /
                                    static_cast<double>(cfg.base_resolution),
                                1.0 / static_cast<double>(cfg.levels - 1));
        for (int l = 0; l < cfg.levels; ++l) {
            double r = static_cast<double>(cfg.base_resolution) * std::pow(ratio, l);
            res[l] = std::max<uint32_t>(1, static_cast<uint32_t>(std::lround(r)));
        }
        return res;
    }

    static SpatialGrid create(const GridConfig& cfg, const Bbox& bbox, Rng rng) {
        cfg.validate();
        SpatialGrid g;
        g.cfg = cfg;
        g.bbox = bbox;
        auto res = level_resolutions(cfg);
        g.levels.resize(cfg.levels);
        for (int l = 0; l < cfg.levels; ++l) {
            GridLevel& lv = g.levels[l];
            lv.resolution = res[l];
            uint64_t corners = static_cast<uint64_t>(res[l] + 1) * (res[l] + 1) * (res[l] + 1);
            lv.dense = corners <= cfg.table_size;
            Eigen::Index rows = lv.dense ? static_cast<Eigen::Index>(corners)
                                         : static_cast<Eigen::Index>(cfg.table_size);
            lv.table.resize(rows, cfg.features_per_level);
            for (Eigen::Index i = 0; i < lv.table.size(); ++i)
                lv.table.data()[i] = rng.uniform(-1e-4, 1e-4);
        }
        return g;
    }

    int embed_dim() const { return cfg.embed_dim(); }

    uint64_t parameter_count() const {
        uint64_t n = 0;
        for (const auto& lv : levels) n += static_cast<uint64_t>(lv.table.size());
        return n;
    }

    // Positions outside the bbox are clamped onto it; degenerate axes map to
    // coordinate 0.
    VecX embed(float x, float y, float z, GridLookupCache* cache = nullptr) const {
        const int f = cfg.features_per_level;
        VecX out(embed_dim());
        if (cache) {
            cache->per_level.clear();
            cache->per_level.resize(levels.size());
        }
        double u[3];
        const float p[3] = {x, y, z};
        for (int a = 0; a < 3; ++a) {
            double extent = static_cast<double>(bbox.max[a]) - static_cast<double>(bbox.min[a]);
            u[a] = extent > 0.0 ? (static_cast<double>(p[a]) - static_cast<double>(bbox.min[a])) / extent
                                : 0.0;
            u[a] = std::clamp(u[a], 0.0, 1.0);
        }
        for (size_t l = 0; l < levels.size(); ++l) {
            const GridLevel& lv = levels[l];
            uint32_t c[3];
            double frac[3];
            for (int a = 0; a < 3; ++a) {
                double scaled = u[a] * static_cast<double>(lv.resolution);
                double fl = std::floor(scaled);
                if (fl > static_cast<double>(lv.resolution - 1))
                    fl = static_cast<double>(lv.resolution - 1);
                c[a] = static_cast<uint32_t>(fl);
                frac[a] = scaled - fl;
            }
            Eigen::VectorXd acc = VecX::Zero(f);
            for (int corner = 0; corner < 8; ++corner) {
                uint32_t dx = corner & 1, dy = (corner >> 1) & 1, dz = (corner >> 2) & 1;
                double w = (dx ? frac[0] : 1.0 - frac[0]) * (dy ? frac[1] : 1.0 - frac[1]) *
                           (dz ? frac[2] : 1.0 - frac[2]);
                uint32_t row = lv.corner_index(c[0] + dx, c[1] + dy, c[2] + dz, cfg.table_size);
                acc += w * lv.table.row(row).transpose();
                if (cache) cache->per_level[l][corner] = {row, w};
            }
            out.segment(static_cast<Eigen::Index>(l) * f, f) = acc;
        }
        return out;
    }

    // Scatter d(loss)/d(embedding) back onto the table rows recorded by a
    // cached lookup. `tables_grad` mirrors the level tables.
    void accumulate_gradient(const GridLookupCache& cache, const VecX& d_embed,
                             std::vector<MatX>& tables_grad) const {
        const int f = cfg.features_per_level;
        for (size_t l = 0; l < levels.size(); ++l) {
            auto seg = d_embed.segment(static_cast<Eigen::Index>(l) * f, f);
            for (const auto& corner : cache.per_level[l])
                tables_grad[l].row(corner.row) += corner.weight * seg.transpose();
        }
    }
};

// One sign bit per grid parameter plus a per-level magnitude: the transmitted
// form of the spatial grid.
struct BinarizedGrid {
    GridConfig cfg;
    std::vector<uint32_t> resolutions;
    std::vector<float> scales;       // per-level mean absolute value, f32
    std::vector<uint8_t> sign_bits;  // packed, level-major then row-major; 1 = positive

    uint64_t bit_count = 0;  // parameter count

    uint64_t serialized_payload_bytes() const {
        return (bit_count + 7) / 8 + scales.size() * 4;
    }
};

inline BinarizedGrid binarize_grid(const SpatialGrid& grid) {
    BinarizedGrid b;
    b.cfg = grid.cfg;
    b.bit_count = grid.parameter_count();
    b.sign_bits.assign((b.bit_count + 7) / 8, 0);
    uint64_t bit = 0;
    for (const auto& lv : grid.levels) {
        b.resolutions.push_back(lv.resolution);
        double scale = lv.table.size() > 0 ? lv.table.cwiseAbs().sum() /
                                                 static_cast<double>(lv.table.size())
                                           : 0.0;
        b.scales.push_back(static_cast<float>(scale));
        for (Eigen::Index i = 0; i < lv.table.size(); ++i) {
            if (lv.table.data()[i] >= 0.0) b.sign_bits[bit / 8] |= uint8_t(1u << (bit % 8));
            ++bit;
        }
    }
    return b;
}

inline SpatialGrid dequantize_grid(const BinarizedGrid& b, const Bbox& bbox) {
    SpatialGrid g;
    g.cfg = b.cfg;
    g.bbox = bbox;
    g.levels.resize(b.resolutions.size());
    uint64_t bit = 0;
    for (size_t l = 0; l < g.levels.size(); ++l) {
        GridLevel& lv = g.levels[l];
        lv.resolution = b.resolutions[l];
        uint64_t corners =
            static_cast<uint64_t>(lv.resolution + 1) * (lv.resolution + 1) * (lv.resolution + 1);
        lv.dense = corners <= b.cfg.table_size;
        Eigen::Index rows = lv.dense ? static_cast<Eigen::Index>(corners)
                                     : static_cast<Eigen::Index>(b.cfg.table_size);
        lv.table.resize(rows, b.cfg.features_per_level);
        double scale = static_cast<double>(b.scales[l]);
        for (Eigen::Index i = 0; i < lv.table.size(); ++i) {
            bool positive = (b.sign_bits[bit / 8] >> (bit % 8)) & 1u;
            lv.table.data()[i] = positive ? scale : -scale;
            ++bit;
        }
    }
    return g;
}

// Grid block inside the bitstream header: L (u8), per-level resolution
// (u32 LE), T (u32 LE), F (u8), packed sign bits, then per-level scales
// (f32 LE).
inline void serialize_grid(const BinarizedGrid& b, std::vector<uint8_t>& out) {
    put_u8(out, static_cast<uint8_t>(b.cfg.levels));
    for (uint32_t r : b.resolutions) put_u32(out, r);
    put_u32(out, b.cfg.table_size);
    put_u8(out, static_cast<uint8_t>(b.cfg.features_per_level));
    out.insert(out.end(), b.sign_bits.begin(), b.sign_bits.end());
    for (float s : b.scales) put_f32(out, s);
}

inline BinarizedGrid parse_grid(ByteReader& r) {
    BinarizedGrid b;
    b.cfg.levels = r.u8();
    if (b.cfg.levels < 1) throw IntegrityError("grid block: zero levels");
    b.resolutions.resize(b.cfg.levels);
    for (auto& res : b.resolutions) res = r.u32();
    b.cfg.table_size = r.u32();
    b.cfg.features_per_level = r.u8();
    b.cfg.base_resolution = b.resolutions.front();
    b.cfg.max_resolution = b.resolutions.back();
    b.cfg.validate();
    b.bit_count = 0;
    for (uint32_t res : b.resolutions) {
        uint64_t corners = static_cast<uint64_t>(res + 1) * (res + 1) * (res + 1);
        uint64_t rows = corners <= b.cfg.table_size ? corners : b.cfg.table_size;
        b.bit_count += rows * static_cast<uint64_t>(b.cfg.features_per_level);
    }
    b.sign_bits = r.bytes((b.bit_count + 7) / 8);
    b.scales.resize(b.cfg.levels);
    for (auto& s : b.scales) s = r.f32();
    return b;
}

}  // namespace scar
