#pragma once

// Self-contained numerical oracles for the test suite. Deliberately
// independent of the library's linear-algebra backend so spectra and ranks
// are cross-checked by a different algorithm.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat make_mat(std::size_t n, std::size_t m) {
    return Mat(n, std::vector<double>(m, 0.0));
}

// Cyclic Jacobi eigenvalue iteration for a symmetric matrix; returns
// eigenvalues in descending order. Robust for the n <= 64 sizes used here.
inline std::vector<double> jacobi_eigenvalues(Mat a) {
    const std::size_t n = a.size();
    if (n == 0) return {};
    double frob = 0.0;
    for (const auto& row : a)
        for (double x : row) frob += x * x;
    frob = std::sqrt(frob);

    for (int sweep = 0; sweep < 200; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a[i][j] * a[i][j];
        if (std::sqrt(2.0 * off) <= 1e-14 * std::max(frob, 1e-300)) break;

        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (a[p][q] == 0.0) continue;
                const double tau = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
    }

    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i][i];
    std::sort(eig.begin(), eig.end(), std::greater<double>());
    return eig;
}

// C = A * B^T for row-major dense matrices.
inline Mat mul_abt(const Mat& a, const Mat& b) {
    Mat c = make_mat(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < a[i].size(); ++k) acc += a[i][k] * b[j][k];
            c[i][j] = acc;
        }
    return c;
}

// A^T * A (Gram of the columns).
inline Mat gram_ata(const Mat& a) {
    const std::size_t m = a.empty() ? 0 : a[0].size();
    Mat g = make_mat(m, m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (const auto& row : a) acc += row[i] * row[j];
            g[i][j] = acc;
        }
    return g;
}

// Singular values of a rectangular matrix via eigenvalues of the smaller
// Gram matrix, clamped at zero before the square root.
inline std::vector<double> singular_values(const Mat& a) {
    if (a.empty()) return {};
    const std::size_t n = a.size(), m = a[0].size();
    Mat g = n <= m ? mul_abt(a, a) : gram_ata(a);
    std::vector<double> eig = jacobi_eigenvalues(std::move(g));
    std::vector<double> sv(eig.size());
    for (std::size_t i = 0; i < eig.size(); ++i) sv[i] = std::sqrt(std::max(0.0, eig[i]));
    return sv;
}

inline std::size_t numeric_rank(const std::vector<double>& sv, double threshold = 1e-8) {
    if (sv.empty() || sv.front() <= 0.0) return 0;
    std::size_t r = 0;
    for (double s : sv)
        if (s > threshold * sv.front()) ++r;
    return r;
}

}  // namespace oracle
