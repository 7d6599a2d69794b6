#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cinemae/autodiff.hpp"
#include "cinemae/random.hpp"

namespace cinemae::nn {

using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

/// y = x·W + b with W stored in×out.
struct Linear {
    Parameter weight;
    Parameter bias;

    Linear() = default;
    Linear(const std::string& name, Eigen::Index in, Eigen::Index out) {
        weight = {name + ".weight", Matrix::Zero(in, out), {}, true};
        bias = {name + ".bias", Matrix::Zero(1, out), {}, true};
    }

    Eigen::Index in() const { return weight.value.rows(); }
    Eigen::Index out() const { return weight.value.cols(); }

    Var operator()(Tape& t, Var x) { return ad::add_row(ad::matmul(x, t.param(weight)), t.param(bias)); }

    void xavier_uniform(Rng& rng) {
        const double a = std::sqrt(6.0 / static_cast<double>(in() + out()));
        weight.value = weight.value.unaryExpr([&](double) { return rng.uniform(-a, a); });
        bias.value.setZero();
    }

    template <typename F>
    void for_each_parameter(F&& f) {
        f(weight);
        f(bias);
    }
};

struct LayerNorm {
    Parameter gain;
    Parameter bias;
    double eps = 1e-6;

    LayerNorm() = default;
    LayerNorm(const std::string& name, Eigen::Index dim, double eps_ = 1e-6) : eps(eps_) {
        gain = {name + ".weight", Matrix::Ones(1, dim), {}, true};
        bias = {name + ".bias", Matrix::Zero(1, dim), {}, true};
    }

    Var operator()(Tape& t, Var x) { return ad::layer_norm(x, t.param(gain), t.param(bias), eps); }

    template <typename F>
    void for_each_parameter(F&& f) {
        f(gain);
        f(bias);
    }
};

/// Two-layer perceptron with a GELU between the layers.
struct Mlp {
    Linear fc1;
    Linear fc2;

    Mlp() = default;
    Mlp(const std::string& name, Eigen::Index in, Eigen::Index hidden, Eigen::Index out)
        : fc1(name + ".fc1", in, hidden), fc2(name + ".fc2", hidden, out) {}

    Var operator()(Tape& t, Var x) { return fc2(t, ad::gelu(fc1(t, x))); }

    void xavier_uniform(Rng& rng) {
        fc1.xavier_uniform(rng);
        fc2.xavier_uniform(rng);
    }

    template <typename F>
    void for_each_parameter(F&& f) {
        fc1.for_each_parameter(f);
        fc2.for_each_parameter(f);
    }
};

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam over a fixed list of parameters. Non-trainable parameters are skipped.
class Adam {
public:
    Adam(std::vector<Parameter*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
        for (Parameter* p : params_) {
            m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
            p->zero_grad();
        }
    }

    void zero_grad() {
        for (Parameter* p : params_) p->zero_grad();
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Parameter& p = *params_[i];
            if (!p.trainable || p.grad.size() == 0) continue;
            Matrix g = p.grad;
            if (config_.weight_decay != 0.0) g += config_.weight_decay * p.value;
            m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
            v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseAbs2();
            p.value.array() -= config_.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps);
        }
        zero_grad();
    }

private:
    std::vector<Parameter*> params_;
    AdamConfig config_;
    std::vector<Matrix> m_, v_;
    long t_ = 0;
};

template <typename Module>
std::vector<Parameter*> parameters_of(Module& m) {
    std::vector<Parameter*> out;
    m.for_each_parameter([&](Parameter& p) { out.push_back(&p); });
    return out;
}

}  // namespace cinemae::nn
