#pragma once

#include <algorithm>
#include <vector>

#include <Eigen/Core>

#include "aal/dual.hpp"

namespace aal::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

/// C(m x n) = op(A) op(B) (+ C when accumulate). Row-major storage; op(A) is
/// m x k, and A is stored k x m when trans_a.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a, const double* b, double* c,
                 bool accumulate) {
    MutMap cm(c, m, n);
    if (!accumulate) {
        cm.setZero();
    }
    if (!trans_a && !trans_b) {
        cm.noalias() += ConstMap(a, m, k) * ConstMap(b, k, n);
    } else if (trans_a && !trans_b) {
        cm.noalias() += ConstMap(a, k, m).transpose() * ConstMap(b, k, n);
    } else if (!trans_a && trans_b) {
        cm.noalias() += ConstMap(a, m, k) * ConstMap(b, n, k).transpose();
    } else {
        cm.noalias() += ConstMap(a, k, m).transpose() * ConstMap(b, n, k).transpose();
    }
}

inline void split_dual(const Dual* x, std::size_t count, std::vector<double>& v, std::vector<double>& d,
                       bool& has_tangent) {
    v.resize(count);
    d.resize(count);
    has_tangent = false;
    for (std::size_t i = 0; i < count; ++i) {
        v[i] = x[i].v;
        d[i] = x[i].d;
        has_tangent = has_tangent || x[i].d != 0.0;
    }
}

/// Dual product as real products: (A + eps A')(B + eps B') = AB + eps (A B' + A' B).
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, const Dual* a, const Dual* b, Dual* c,
                 bool accumulate) {
    const auto mk = static_cast<std::size_t>(m) * k;
    const auto kn = static_cast<std::size_t>(k) * n;
    const auto mn = static_cast<std::size_t>(m) * n;
    std::vector<double> av, ad, bv, bd, cv(mn, 0.0), cd(mn, 0.0);
    bool a_t = false;
    bool b_t = false;
    split_dual(a, mk, av, ad, a_t);
    split_dual(b, kn, bv, bd, b_t);
    gemm(trans_a, trans_b, m, n, k, av.data(), bv.data(), cv.data(), false);
    if (b_t) {
        gemm(trans_a, trans_b, m, n, k, av.data(), bd.data(), cd.data(), true);
    }
    if (a_t) {
        gemm(trans_a, trans_b, m, n, k, ad.data(), bv.data(), cd.data(), true);
    }
    for (std::size_t i = 0; i < mn; ++i) {
        if (accumulate) {
            c[i].v += cv[i];
            c[i].d += cd[i];
        } else {
            c[i] = Dual(cv[i], cd[i]);
        }
    }
}

}  // namespace aal::detail
