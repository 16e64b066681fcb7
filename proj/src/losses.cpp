#include "plab/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace plab {

LossResult mse_loss(const Tensor& pred, const Tensor& target) {
    if (!same_shape(pred, target)) {
        std::ostringstream os;
        os << "mse_loss: shape mismatch " << pred.shape_str() << " vs " << target.shape_str();
        throw std::invalid_argument(os.str());
    }
    double n = static_cast<double>(pred.dim(0));
    LossResult res;
    res.grad = Tensor::zeros(pred.shape());
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double d = pred[i] - target[i];
        acc += d * d;
        res.grad[i] = 2.0 * d / n;
    }
    res.loss = acc / n;
    return res;
}

Tensor softmax(const Tensor& logits) {
    Tensor out = Tensor::zeros(logits.shape());
    std::size_t n = logits.dim(0);
    std::size_t k = logits.row_size();
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.data() + i * k;
        double mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        double* o = out.data() + i * k;
        for (std::size_t j = 0; j < k; ++j) {
            o[j] = std::exp(row[j] - mx);
            z += o[j];
        }
        for (std::size_t j = 0; j < k; ++j) o[j] /= z;
    }
    return out;
}

LossResult xent_loss(const Tensor& logits, const std::vector<int>& labels, double smoothing) {
    std::size_t n = logits.dim(0);
    std::size_t k = logits.row_size();
    if (labels.size() != n)
        throw std::invalid_argument("xent_loss: label count does not match batch size");
    if (smoothing < 0.0 || smoothing >= 1.0)
        throw std::invalid_argument("xent_loss: smoothing must lie in [0,1)");
    for (std::size_t i = 0; i < n; ++i)
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
            std::ostringstream os;
            os << "xent_loss: label " << labels[i] << " out of range for " << k << " classes";
            throw std::invalid_argument(os.str());
        }

    LossResult res;
    res.grad = Tensor::zeros(logits.shape());
    double uniform = smoothing / static_cast<double>(k);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.data() + i * k;
        double mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        double logz = std::log(z) + mx;
        double* g = res.grad.data() + i * k;
        for (std::size_t j = 0; j < k; ++j) {
            double q = uniform + (static_cast<std::size_t>(labels[i]) == j ? 1.0 - smoothing : 0.0);
            double logp = row[j] - logz;
            acc -= q * logp;
            g[j] = (std::exp(logp) - q) / static_cast<double>(n);
        }
    }
    res.loss = acc / static_cast<double>(n);
    return res;
}

// ---------------------------------------------------------------------------
// Two-hot codec
// ---------------------------------------------------------------------------

TwoHotCodec::TwoHotCodec(int bound, double smoothing) : m_(bound), kappa_(smoothing) {
    if (bound < 1) throw std::invalid_argument("TwoHotCodec: bound must be >= 1");
    if (smoothing < 0.0 || smoothing >= 1.0)
        throw std::invalid_argument("TwoHotCodec: smoothing must lie in [0,1)");
}

std::vector<double> TwoHotCodec::encode(double c) const {
    if (!std::isfinite(c) || std::fabs(c) > static_cast<double>(m_)) {
        std::ostringstream os;
        os << "TwoHotCodec: value " << c << " outside [-" << m_ << ", " << m_ << "]";
        throw std::out_of_range(os.str());
    }
    std::vector<double> p(num_atoms(), 0.0);
    double lo = std::floor(c);
    double hi = std::ceil(c);
    std::size_t ilo = static_cast<std::size_t>(static_cast<int>(lo) + m_);
    if (lo == hi) {
        p[ilo] = 1.0;
    } else {
        p[ilo] = hi - c;
        p[ilo + 1] = c - lo;
    }
    return p;
}

std::vector<double> TwoHotCodec::encode_smoothed(double c) const {
    std::vector<double> p = encode(c);
    if (kappa_ > 0.0) {
        double u = kappa_ / static_cast<double>(num_atoms());
        for (double& v : p) v = (1.0 - kappa_) * v + u;
    }
    return p;
}

double TwoHotCodec::decode(const std::vector<double>& probs) const {
    if (probs.size() != num_atoms())
        throw std::invalid_argument("TwoHotCodec: probability vector has wrong length");
    double e = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) e += probs[i] * atom(i);
    return e;
}

LossResult TwoHotCodec::loss(const Tensor& logits, const std::vector<double>& targets) const {
    std::size_t n = logits.dim(0);
    std::size_t a = logits.row_size();
    if (a != num_atoms())
        throw std::invalid_argument("TwoHotCodec: logits width does not match atom count");
    if (targets.size() != n)
        throw std::invalid_argument("TwoHotCodec: target count does not match batch size");

    LossResult res;
    res.grad = Tensor::zeros(logits.shape());
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> q = encode_smoothed(targets[i]);
        const double* row = logits.data() + i * a;
        double mx = row[0];
        for (std::size_t j = 1; j < a; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < a; ++j) z += std::exp(row[j] - mx);
        double logz = std::log(z) + mx;
        double* g = res.grad.data() + i * a;
        for (std::size_t j = 0; j < a; ++j) {
            double logp = row[j] - logz;
            if (q[j] > 0.0) acc -= q[j] * logp;
            g[j] = (std::exp(logp) - q[j]) / static_cast<double>(n);
        }
    }
    res.loss = acc / static_cast<double>(n);
    return res;
}

std::vector<double> TwoHotCodec::decode_logits(const Tensor& logits) const {
    Tensor p = softmax(logits);
    std::size_t n = p.dim(0);
    std::size_t a = p.row_size();
    if (a != num_atoms())
        throw std::invalid_argument("TwoHotCodec: logits width does not match atom count");
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < a; ++j) out[i] += p.data()[i * a + j] * atom(j);
    return out;
}

}  // namespace plab
