#pragma once

#include <algorithm>
#include <vector>

#include "scar/common.hpp"
#include "scar/core.hpp"

namespace scar {

using IndexMat = Eigen::Matrix<int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Per-anchor sequence of M codebook indices: column 0 addresses the coarse
// codebook, columns >= 1 the shared residual codebook.
struct IndexTensor {
    IndexMat indices;  // N x M

    Eigen::Index count() const { return indices.rows(); }
    int stages() const { return static_cast<int>(indices.cols()); }
};

// Coarse codebook for stage 1 plus the single residual codebook shared by all
// refinement stages. Residual entry 0 is pinned to the zero vector, which
// guarantees monotone refinement and gives the entropy model a "no change"
// symbol.
struct CodebookPair {
    MatX coarse;    // K_base x D
    MatX residual;  // K_res x D

    // EMA training state.
    VecX coarse_counts, residual_counts;
    MatX coarse_sums, residual_sums;
    // Entries assigned at least once in the final epoch, or reseeded there.
    std::vector<uint8_t> coarse_live, residual_live;
    bool trained = false;

    int dim() const { return static_cast<int>(coarse.cols()); }
    Eigen::Index k_base() const { return coarse.rows(); }
    Eigen::Index k_res() const { return residual.rows(); }

    void require_trained() const {
        if (!trained) throw DataError("codebooks are untrained");
    }

    // Rounds every entry through f32, matching the serialized form exactly so
    // that encoder and decoder reconstruct identical features.
    CodebookPair deployed() const {
        require_trained();
        CodebookPair d = *this;
        d.coarse = coarse.cast<float>().cast<double>();
        d.residual = residual.cast<float>().cast<double>();
        return d;
    }
};

namespace detail {

// Argmin of squared distance over codebook rows, ties broken by lowest index.
inline int32_t nearest_row(const MatX& codebook, const Eigen::Ref<const VecX>& v) {
    int32_t best = 0;
    double best_d = (codebook.row(0).transpose() - v).squaredNorm();
    for (Eigen::Index k = 1; k < codebook.rows(); ++k) {
        double d = (codebook.row(k).transpose() - v).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = static_cast<int32_t>(k);
        }
    }
    return best;
}

}  // namespace detail

// Staged quantization: stage 1 is the nearest coarse entry, every later stage
// quantizes the running residual against the shared residual codebook.
// residual_norms(i, m) is the norm of the residual remaining AFTER stage m+1.
inline std::pair<IndexTensor, MatX> quantize(const MatXf& features, const CodebookPair& cb,
                                             int stages) {
    cb.require_trained();
    if (stages < 1) throw ConfigError("quantize: stages must be >= 1");
    if (features.cols() != cb.dim()) throw DataError("quantize: feature dimension mismatch");

    const Eigen::Index n = features.rows();
    IndexTensor out;
    out.indices.resize(n, stages);
    MatX norms(n, stages);

    for (Eigen::Index i = 0; i < n; ++i) {
        VecX r = features.row(i).cast<double>().transpose();
        int32_t k1 = detail::nearest_row(cb.coarse, r);
        out.indices(i, 0) = k1;
        r -= cb.coarse.row(k1).transpose();
        norms(i, 0) = r.norm();
        for (int m = 1; m < stages; ++m) {
            int32_t km = detail::nearest_row(cb.residual, r);
            out.indices(i, m) = km;
            r -= cb.residual.row(km).transpose();
            norms(i, m) = r.norm();
        }
    }
    return {std::move(out), std::move(norms)};
}

// Reconstruction from the first `upto` stages: coarse codeword plus the
// selected residual codewords, summed in stage order.
inline MatX dequantize(const IndexTensor& idx, const CodebookPair& cb, int upto) {
    cb.require_trained();
    if (upto < 1 || upto > idx.stages()) throw ConfigError("dequantize: upto out of range");
    const Eigen::Index n = idx.count();
    MatX out(n, cb.dim());
    for (Eigen::Index i = 0; i < n; ++i) {
        int32_t k1 = idx.indices(i, 0);
        if (k1 < 0 || k1 >= cb.k_base()) throw DataError("dequantize: coarse index out of range");
        out.row(i) = cb.coarse.row(k1);
        for (int m = 1; m < upto; ++m) {
            int32_t km = idx.indices(i, m);
            if (km < 0 || km >= cb.k_res())
                throw DataError("dequantize: residual index out of range");
            out.row(i) += cb.residual.row(km);
        }
    }
    return out;
}

namespace detail {

inline MatX kmeanspp_init(const MatX& data, Eigen::Index k, Rng& rng) {
    const Eigen::Index n = data.rows();
    MatX centers(k, data.cols());
    Eigen::Index first = static_cast<Eigen::Index>(rng.uniform_index(static_cast<uint64_t>(n)));
    centers.row(0) = data.row(first);
    VecX d2(n);
    for (Eigen::Index i = 0; i < n; ++i) d2(i) = (data.row(i) - centers.row(0)).squaredNorm();
    for (Eigen::Index c = 1; c < k; ++c) {
        double total = d2.sum();
        Eigen::Index pick;
        if (total <= 0.0) {
            pick = static_cast<Eigen::Index>(rng.uniform_index(static_cast<uint64_t>(n)));
        } else {
            double r = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (Eigen::Index i = 0; i < n; ++i) {
                acc += d2(i);
                if (r < acc) {
                    pick = i;
                    break;
                }
            }
        }
        centers.row(c) = data.row(pick);
        for (Eigen::Index i = 0; i < n; ++i)
            d2(i) = std::min(d2(i), (data.row(i) - centers.row(c)).squaredNorm());
    }
    return centers;
}

// One EMA epoch over `data`. Entries in [lo, K) are updated; rows below `lo`
// are pinned. Dead entries are reseeded to random data rows.
inline void ema_epoch(const MatX& data, MatX& entries, VecX& counts, MatX& sums,
                      std::vector<uint8_t>& live, Eigen::Index lo, double decay, Rng& rng) {
    const Eigen::Index n = data.rows();
    const Eigen::Index k = entries.rows();
    VecX batch_counts = VecX::Zero(k);
    MatX batch_sums = MatX::Zero(k, data.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        int32_t a = nearest_row(entries, data.row(i).transpose());
        batch_counts(a) += 1.0;
        batch_sums.row(a) += data.row(i);
    }
    std::fill(live.begin(), live.end(), uint8_t{0});
    for (Eigen::Index e = 0; e < k; ++e) {
        if (e < lo) {
            live[static_cast<size_t>(e)] = 1;  // pinned entries count as live
            continue;
        }
        if (batch_counts(e) > 0.0) {
            counts(e) = decay * counts(e) + (1.0 - decay) * batch_counts(e);
            sums.row(e) = decay * sums.row(e) + (1.0 - decay) * batch_sums.row(e);
            entries.row(e) = sums.row(e) / counts(e);
            live[static_cast<size_t>(e)] = 1;
        } else {
            Eigen::Index pick =
                static_cast<Eigen::Index>(rng.uniform_index(static_cast<uint64_t>(n)));
            entries.row(e) = data.row(pick);
            counts(e) = 1.0;
            sums.row(e) = entries.row(e);
            live[static_cast<size_t>(e)] = 1;  // reseeded this epoch
        }
    }
}

}  // namespace detail

// Fits the coarse codebook to the raw features and the shared residual
// codebook to the pooled residuals of stages >= 2. k-means++ init followed by
// EMA updates (decay 0.99); deterministic given the rng.
inline CodebookPair train_codebooks(const MatXf& features, const CodecConfig& config, Rng rng) {
    if (features.rows() < 1) throw DataError("train_codebooks: empty input");
    if (features.cols() != config.feature_dim)
        throw DataError("train_codebooks: feature dimension does not match config");
    const double decay = 0.99;
    const MatX data = features.cast<double>();
    const Eigen::Index n = data.rows();

    CodebookPair cb;
    Rng init_rng = rng.child(1);
    Rng reseed_rng = rng.child(2);

    cb.coarse = detail::kmeanspp_init(data, config.k_base, init_rng);
    cb.coarse_counts = VecX::Ones(config.k_base);
    cb.coarse_sums = cb.coarse;
    cb.coarse_live.assign(config.k_base, 1);
    for (int epoch = 0; epoch < config.codebook_epochs; ++epoch)
        detail::ema_epoch(data, cb.coarse, cb.coarse_counts, cb.coarse_sums, cb.coarse_live, 0,
                          decay, reseed_rng);

    // Pool the inputs of every residual stage under the current codebooks.
    auto pooled_residuals = [&](const CodebookPair& state) {
        MatX pool((config.stages - 1) * n, data.cols());
        Eigen::Index row = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            VecX r = data.row(i).transpose();
            r -= state.coarse.row(detail::nearest_row(state.coarse, r)).transpose();
            for (int m = 1; m < config.stages; ++m) {
                pool.row(row++) = r.transpose();
                r -= state.residual.row(detail::nearest_row(state.residual, r)).transpose();
            }
        }
        return pool;
    };

    cb.residual = MatX::Zero(config.k_res, data.cols());
    cb.residual_counts = VecX::Ones(config.k_res);
    cb.residual_sums = MatX::Zero(config.k_res, data.cols());
    cb.residual_live.assign(config.k_res, 1);
    if (config.stages > 1) {
        // Entry 0 stays the zero vector; seed the rest from stage-2 residuals.
        MatX first_resid(n, data.cols());
        for (Eigen::Index i = 0; i < n; ++i) {
            VecX r = data.row(i).transpose();
            first_resid.row(i) =
                (r - cb.coarse.row(detail::nearest_row(cb.coarse, r)).transpose()).transpose();
        }
        MatX seeds = detail::kmeanspp_init(first_resid, config.k_res, init_rng);
        cb.residual.bottomRows(config.k_res - 1) = seeds.bottomRows(config.k_res - 1);
        cb.residual_sums = cb.residual;
        for (int epoch = 0; epoch < config.codebook_epochs; ++epoch) {
            MatX pool = pooled_residuals(cb);
            detail::ema_epoch(pool, cb.residual, cb.residual_counts, cb.residual_sums,
                              cb.residual_live, 1, decay, reseed_rng);
        }
    }

    cb.trained = true;
    return cb;
}

// Frozen rotation-plus-rescale mapping an encoder output z onto its codeword
// e = lambda * R * z. R is the composition of two Householder reflections, so
// it is exact and needs only two stored unit vectors. In the backward pass
// lambda*R is a constant: the gradient delivered to z is (lambda*R)^T g.
struct RotationTransform {
    VecX z_hat;   // reflection 1 axis (normalized source)
    VecX r_axis;  // reflection 2 axis (bisector of source and target)
    double lambda = 1.0;
    bool identity = false;  // degenerate fallback for zero-norm inputs

    // R v = H_r (H_z v) with H_a = I - 2 a a^T.
    VecX apply(const VecX& v) const {
        if (identity) return v;
        VecX w = v - 2.0 * z_hat.dot(v) * z_hat;
        return w - 2.0 * r_axis.dot(w) * r_axis;
    }

    // R^T v = H_z (H_r v); Householder reflections are symmetric.
    VecX apply_transpose(const VecX& v) const {
        if (identity) return v;
        VecX w = v - 2.0 * r_axis.dot(v) * r_axis;
        return w - 2.0 * z_hat.dot(w) * z_hat;
    }

    VecX forward(const VecX& z) const { return lambda * apply(z); }

    // Gradient to z for incoming gradient g, with lambda*R held constant.
    VecX backward(const VecX& g) const { return lambda * apply_transpose(g); }

    MatX matrix() const {
        Eigen::Index d = identity ? lambda_dim_ : z_hat.size();
        MatX m(d, d);
        for (Eigen::Index c = 0; c < d; ++c) m.col(c) = apply(VecX::Unit(d, c));
        return m;
    }

    Eigen::Index lambda_dim_ = 0;  // dimension for the identity fallback
};

inline RotationTransform rotation_transform(const VecX& z, const VecX& e) {
    if (z.size() != e.size()) throw DataError("rotation_transform: dimension mismatch");
    RotationTransform t;
    t.lambda_dim_ = z.size();
    const double zn = z.norm();
    const double en = e.norm();
    if (zn <= 0.0 || en <= 0.0) {
        t.identity = true;
        t.lambda = 1.0;
        return t;
    }
    t.lambda = en / zn;
    t.z_hat = z / zn;
    VecX e_hat = e / en;
    VecX bisector = t.z_hat + e_hat;
    double bn = bisector.norm();
    if (bn < 1e-12) {
        // Antiparallel: any axis orthogonal to z_hat gives a 180-degree
        // rotation in the spanned plane.
        Eigen::Index smallest = 0;
        t.z_hat.cwiseAbs().minCoeff(&smallest);
        VecX axis = VecX::Unit(z.size(), smallest);
        axis -= axis.dot(t.z_hat) * t.z_hat;
        t.r_axis = axis / axis.norm();
    } else {
        t.r_axis = bisector / bn;
    }
    return t;
}

// L_rec is the mean absolute difference, L_commit the mean squared
// difference. Gradient contract: L_commit carries gradient only to the
// continuous side (stop-gradient on the codeword). The caller assembles
// L_VQ = L_rec + lambda_commit * L_commit.
inline std::pair<double, double> vq_losses(const MatX& z_cont, const MatX& z_q) {
    if (z_cont.rows() != z_q.rows() || z_cont.cols() != z_q.cols())
        throw DataError("vq_losses: shape mismatch");
    const double count = static_cast<double>(z_cont.size());
    double rec = (z_cont - z_q).cwiseAbs().sum() / count;
    double commit = (z_cont - z_q).squaredNorm() / count;
    return {rec, commit};
}

}  // namespace scar
