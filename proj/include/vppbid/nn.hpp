#pragma once

// Fully connected networks with rectifier hidden layers, hand-written
// backpropagation and Adam. Samples are columns.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "vppbid/binio.hpp"
#include "vppbid/errors.hpp"

namespace vppbid {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class OutputActivation { identity, sigmoid };

struct MlpGrad {
    std::vector<MatrixXd> w;
    std::vector<VectorXd> b;

    [[nodiscard]] bool finite() const {
        for (const auto& m : w)
            if (!m.allFinite()) return false;
        for (const auto& v : b)
            if (!v.allFinite()) return false;
        return true;
    }
};

/// Post-activation outputs of every layer; act[0] is the input.
struct MlpCache {
    std::vector<MatrixXd> act;
};

class Mlp {
public:
    Mlp() = default;

    Mlp(std::vector<int> dims, OutputActivation out) : dims_(std::move(dims)), out_(out) {
        if (dims_.size() < 2) throw ConfigError("a network needs at least an input and an output layer");
        for (int d : dims_)
            if (d <= 0) throw ConfigError("layer widths must be positive");
        for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
            w_.push_back(MatrixXd::Zero(dims_[l + 1], dims_[l]));
            b_.push_back(VectorXd::Zero(dims_[l + 1]));
        }
    }

    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases; the last
    /// layer is additionally multiplied by `final_scale`.
    template <class Urbg>
    void init_uniform_fan_in(Urbg& rng, double final_scale = 1.0) {
        for (std::size_t l = 0; l < w_.size(); ++l) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(w_[l].cols()));
            const double s = l + 1 == w_.size() ? final_scale : 1.0;
            std::uniform_real_distribution<double> u(-bound, bound);
            for (Eigen::Index k = 0; k < w_[l].size(); ++k) w_[l].data()[k] = s * u(rng);
            for (Eigen::Index k = 0; k < b_[l].size(); ++k) b_[l][k] = s * u(rng);
        }
    }

    [[nodiscard]] int input_dim() const { return dims_.front(); }
    [[nodiscard]] int output_dim() const { return dims_.back(); }
    [[nodiscard]] std::size_t layers() const { return w_.size(); }
    [[nodiscard]] const std::vector<int>& dims() const { return dims_; }
    [[nodiscard]] OutputActivation output_activation() const { return out_; }
    [[nodiscard]] std::vector<MatrixXd>& weights() { return w_; }
    [[nodiscard]] const std::vector<MatrixXd>& weights() const { return w_; }
    [[nodiscard]] std::vector<VectorXd>& biases() { return b_; }
    [[nodiscard]] const std::vector<VectorXd>& biases() const { return b_; }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < w_.size(); ++l) n += static_cast<std::size_t>(w_[l].size() + b_[l].size());
        return n;
    }

    [[nodiscard]] bool finite() const {
        for (std::size_t l = 0; l < w_.size(); ++l)
            if (!w_[l].allFinite() || !b_[l].allFinite()) return false;
        return true;
    }

    MatrixXd forward(const MatrixXd& x, MlpCache* cache = nullptr) const {
        if (x.rows() != input_dim())
            throw ConfigError("network input has " + std::to_string(x.rows()) + " rows, expected " +
                              std::to_string(input_dim()));
        if (cache) {
            cache->act.resize(w_.size() + 1);
            cache->act[0] = x;
        }
        MatrixXd h = x;
        for (std::size_t l = 0; l < w_.size(); ++l) {
            MatrixXd z = w_[l] * h;
            z.colwise() += b_[l];
            if (l + 1 < w_.size())
                z = z.cwiseMax(0.0);
            else if (out_ == OutputActivation::sigmoid)
                z = z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
            h = std::move(z);
            if (cache) cache->act[l + 1] = h;
        }
        return h;
    }

    /// Single sample.
    [[nodiscard]] VectorXd evaluate(const VectorXd& x) const { return forward(MatrixXd(x)).col(0); }

    /// Gradient of sum_j <g_out(:,j), out(:,j)> with respect to the
    /// parameters (into `grad`, if given) and the input (returned).
    MatrixXd backward(const MlpCache& cache, const MatrixXd& g_out, MlpGrad* grad) const {
        if (cache.act.size() != w_.size() + 1) throw ConfigError("backward pass without a matching forward cache");
        if (grad) {
            grad->w.resize(w_.size());
            grad->b.resize(w_.size());
        }
        MatrixXd g = g_out;
        for (std::size_t l = w_.size(); l-- > 0;) {
            const MatrixXd& y = cache.act[l + 1];
            if (l + 1 < w_.size())
                g = g.cwiseProduct((y.array() > 0.0).cast<double>().matrix());
            else if (out_ == OutputActivation::sigmoid)
                g = g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix()));
            if (grad) {
                grad->w[l].noalias() = g * cache.act[l].transpose();
                grad->b[l] = g.rowwise().sum();
            }
            g = (w_[l].transpose() * g).eval();
        }
        return g;
    }

    [[nodiscard]] MlpGrad zero_grad() const {
        MlpGrad g;
        for (std::size_t l = 0; l < w_.size(); ++l) {
            g.w.push_back(MatrixXd::Zero(w_[l].rows(), w_[l].cols()));
            g.b.push_back(VectorXd::Zero(b_[l].size()));
        }
        return g;
    }

    void save(BinaryWriter& out) const {
        out.tag("mlp");
        out.put<std::int32_t>(static_cast<std::int32_t>(dims_.size()));
        for (int d : dims_) out.put<std::int32_t>(d);
        out.put<std::int32_t>(out_ == OutputActivation::sigmoid ? 1 : 0);
        for (std::size_t l = 0; l < w_.size(); ++l) {
            out.put_matrix(w_[l]);
            out.put_vector(b_[l]);
        }
    }

    void load(BinaryReader& in) {
        in.expect_tag("mlp");
        const auto n = in.get<std::int32_t>();
        if (n != static_cast<std::int32_t>(dims_.size())) in.fail("network depth differs from the configuration");
        for (int d : dims_)
            if (in.get<std::int32_t>() != d) in.fail("layer width differs from the configuration");
        if (in.get<std::int32_t>() != (out_ == OutputActivation::sigmoid ? 1 : 0)) in.fail("output activation differs");
        for (std::size_t l = 0; l < w_.size(); ++l) {
            auto w = in.get_matrix();
            auto b = in.get_vector();
            if (w.rows() != w_[l].rows() || w.cols() != w_[l].cols() || b.size() != b_[l].size())
                in.fail("layer shape mismatch");
            w_[l] = std::move(w);
            b_[l] = std::move(b);
        }
    }

private:
    std::vector<int> dims_;
    OutputActivation out_ = OutputActivation::identity;
    std::vector<MatrixXd> w_;
    std::vector<VectorXd> b_;
};

/// theta' <- tau*theta + (1 - tau)*theta'
inline void soft_update(Mlp& target, const Mlp& source, double tau) {
    if (target.dims() != source.dims()) throw ConfigError("soft update between networks of different shape");
    for (std::size_t l = 0; l < target.layers(); ++l) {
        target.weights()[l] = tau * source.weights()[l] + (1.0 - tau) * target.weights()[l];
        target.biases()[l] = tau * source.biases()[l] + (1.0 - tau) * target.biases()[l];
    }
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam() = default;
    explicit Adam(const Mlp& net) : m_(net.zero_grad()), v_(net.zero_grad()) {}

    /// One descent step on `grad`.
    void step(Mlp& net, const MlpGrad& grad, double lr, const AdamConfig& cfg) {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
        auto apply = [&](auto& param, const auto& g, auto& m, auto& v) {
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
            param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.eps);
        };
        for (std::size_t l = 0; l < net.layers(); ++l) {
            apply(net.weights()[l], grad.w[l], m_.w[l], v_.w[l]);
            apply(net.biases()[l], grad.b[l], m_.b[l], v_.b[l]);
        }
    }

    [[nodiscard]] long steps() const { return t_; }

    void save(BinaryWriter& out) const {
        out.tag("adam");
        out.put<std::int64_t>(t_);
        for (const auto* s : {&m_, &v_})
            for (std::size_t l = 0; l < s->w.size(); ++l) {
                out.put_matrix(s->w[l]);
                out.put_vector(s->b[l]);
            }
    }

    void load(BinaryReader& in) {
        in.expect_tag("adam");
        t_ = in.get<std::int64_t>();
        for (auto* s : {&m_, &v_})
            for (std::size_t l = 0; l < s->w.size(); ++l) {
                auto w = in.get_matrix();
                auto b = in.get_vector();
                if (w.rows() != s->w[l].rows() || w.cols() != s->w[l].cols() || b.size() != s->b[l].size())
                    in.fail("optimizer moment shape mismatch");
                s->w[l] = std::move(w);
                s->b[l] = std::move(b);
            }
    }

private:
    MlpGrad m_, v_;
    long t_ = 0;
};

}  // namespace vppbid
