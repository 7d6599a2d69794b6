#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Parameters enter the
// tape by reference (no copy), so the same machinery serves inference over a
// full-size backbone and training of the small detector heads. Operations
// whose inputs carry no gradient record no backward closure.

#include <cmath>
#include <deque>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cinemae/error.hpp"

namespace cinemae::ad {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

/// A named trainable tensor. `grad` accumulates across backward passes until
/// zeroed by the optimizer.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
    bool trainable = true;

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    bool valid() const { return tape != nullptr; }
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix m) {
        Node& n = push();
        n.value = std::move(m);
        return {this, last_id()};
    }

    /// Borrow `m` without copying; `m` must outlive the tape.
    Var constant_ref(const Matrix& m) {
        Node& n = push();
        n.ref = &m;
        return {this, last_id()};
    }

    /// Parameter leaf. Gradients flow into `p.grad` only if `p.trainable`.
    Var param(Parameter& p) {
        Node& n = push();
        n.ref = &p.value;
        if (p.trainable) {
            n.needs_grad = true;
            n.sink = &p;
        }
        return {this, last_id()};
    }

    /// Leaf that records a gradient but writes it nowhere; read it back with
    /// `grad()`. Used by gradient checks on intermediate inputs.
    Var variable(Matrix m) {
        Node& n = push();
        n.value = std::move(m);
        n.needs_grad = true;
        return {this, last_id()};
    }

    const Matrix& value(Var v) const {
        const Node& n = nodes_[static_cast<std::size_t>(v.id)];
        return n.ref ? *n.ref : n.value;
    }

    bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

    const Matrix& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

    std::size_t size() const { return nodes_.size(); }

    /// Backpropagate from a 1×1 `loss`, accumulating into parameter grads.
    void backward(Var loss) {
        if (loss.tape != this) throw ValueError("backward: variable belongs to another tape");
        if (value(loss).size() != 1) throw ShapeError("backward: loss must be a scalar");
        Node& root = node(loss.id);
        if (!root.needs_grad) return;
        root.grad = Matrix::Ones(1, 1);
        for (int id = loss.id; id >= 0; --id) {
            Node& n = node(id);
            if (!n.needs_grad || n.grad.size() == 0) continue;
            if (n.backward) n.backward();
            if (n.sink) {
                if (n.sink->grad.size() == 0) n.sink->zero_grad();
                n.sink->grad += n.grad;
            }
        }
    }

    // Used by op implementations.
    Var record(Matrix value, std::initializer_list<Var> inputs, std::function<void(const Matrix&)> back) {
        bool any = false;
        for (const Var& v : inputs) any = any || needs_grad(v);
        Node& n = push();
        n.value = std::move(value);
        const int id = last_id();
        if (any) {
            n.needs_grad = true;
            n.backward = [this, id, back = std::move(back)] { back(nodes_[static_cast<std::size_t>(id)].grad); };
        }
        return {this, id};
    }

    Var record(Matrix value, std::span<const Var> inputs, std::function<void(const Matrix&)> back) {
        bool any = false;
        for (const Var& v : inputs) any = any || needs_grad(v);
        Node& n = push();
        n.value = std::move(value);
        const int id = last_id();
        if (any) {
            n.needs_grad = true;
            n.backward = [this, id, back = std::move(back)] { back(nodes_[static_cast<std::size_t>(id)].grad); };
        }
        return {this, id};
    }

    void accumulate(Var v, const Matrix& g) {
        Node& n = node(v.id);
        if (!n.needs_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

private:
    struct Node {
        Matrix value;
        const Matrix* ref = nullptr;
        Matrix grad;
        bool needs_grad = false;
        Parameter* sink = nullptr;
        std::function<void()> backward;
    };

    Node& push() { return nodes_.emplace_back(); }
    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    int last_id() const { return static_cast<int>(nodes_.size()) - 1; }

    std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }

namespace detail {
inline void same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
}
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}
inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}
}  // namespace detail

using detail::sigmoid;

// ---- linear algebra -------------------------------------------------------

inline Var matmul(Var a, Var b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " + std::to_string(b.rows()));
    Tape& t = *a.tape;
    return t.record(a.value() * b.value(), {a, b}, [a, b](const Matrix& g) {
        Tape& t = *a.tape;
        if (t.needs_grad(a)) t.accumulate(a, g * b.value().transpose());
        if (t.needs_grad(b)) t.accumulate(b, a.value().transpose() * g);
    });
}

inline Var transpose(Var a) {
    return a.tape->record(a.value().transpose(), {a}, [a](const Matrix& g) { a.tape->accumulate(a, g.transpose()); });
}

inline Var add(Var a, Var b) {
    detail::same_shape(a, b, "add");
    return a.tape->record(a.value() + b.value(), {a, b}, [a, b](const Matrix& g) {
        a.tape->accumulate(a, g);
        a.tape->accumulate(b, g);
    });
}

inline Var sub(Var a, Var b) {
    detail::same_shape(a, b, "sub");
    return a.tape->record(a.value() - b.value(), {a, b}, [a, b](const Matrix& g) {
        a.tape->accumulate(a, g);
        a.tape->accumulate(b, -g);
    });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
    detail::same_shape(a, b, "mul");
    return a.tape->record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](const Matrix& g) {
        a.tape->accumulate(a, g.cwiseProduct(b.value()));
        a.tape->accumulate(b, g.cwiseProduct(a.value()));
    });
}

inline Var scale(Var a, double s) {
    return a.tape->record(a.value() * s, {a}, [a, s](const Matrix& g) { a.tape->accumulate(a, g * s); });
}

inline Var add_scalar(Var a, double s) {
    return a.tape->record(a.value().array() + s, {a}, [a](const Matrix& g) { a.tape->accumulate(a, g); });
}

/// a + 1·row, broadcasting a 1×n row over every row of a.
inline Var add_row(Var a, Var row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias must be 1x" + std::to_string(a.cols()));
    Matrix out = a.value().rowwise() + row.value().row(0);
    return a.tape->record(std::move(out), {a, row}, [a, row](const Matrix& g) {
        a.tape->accumulate(a, g);
        a.tape->accumulate(row, g.colwise().sum());
    });
}

// ---- pointwise nonlinearities ---------------------------------------------

inline Var gelu(Var a) {
    return a.tape->record(a.value().unaryExpr(&detail::gelu), {a}, [a](const Matrix& g) {
        a.tape->accumulate(a, g.cwiseProduct(a.value().unaryExpr(&detail::gelu_grad)));
    });
}

inline Var sigmoid(Var a) {
    Matrix y = a.value().unaryExpr([](double x) { return detail::sigmoid(x); });
    return a.tape->record(y, {a}, [a, y](const Matrix& g) {
        a.tape->accumulate(a, g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
    });
}

inline Var square(Var a) {
    return a.tape->record(a.value().cwiseAbs2(), {a}, [a](const Matrix& g) {
        a.tape->accumulate(a, 2.0 * g.cwiseProduct(a.value()));
    });
}

inline Var abs(Var a) {
    return a.tape->record(a.value().cwiseAbs(), {a}, [a](const Matrix& g) {
        a.tape->accumulate(a, g.cwiseProduct(a.value().unaryExpr([](double x) { return double((x > 0) - (x < 0)); })));
    });
}

// ---- reductions -----------------------------------------------------------

inline Var sum(Var a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    const auto r = a.rows(), c = a.cols();
    return a.tape->record(std::move(out), {a}, [a, r, c](const Matrix& g) {
        a.tape->accumulate(a, Matrix::Constant(r, c, g(0, 0)));
    });
}

inline Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    return scale(sum(a), 1.0 / n);
}

/// Mean over rows: r×c → 1×c.
inline Var mean_rows(Var a) {
    const auto r = a.rows();
    Matrix out = a.value().colwise().mean();
    return a.tape->record(std::move(out), {a}, [a, r](const Matrix& g) {
        a.tape->accumulate(a, g.replicate(r, 1) / static_cast<double>(r));
    });
}

/// Mean over columns: r×c → r×1.
inline Var mean_cols(Var a) {
    const auto c = a.cols();
    Matrix out = a.value().rowwise().mean();
    return a.tape->record(std::move(out), {a}, [a, c](const Matrix& g) {
        a.tape->accumulate(a, g.replicate(1, c) / static_cast<double>(c));
    });
}

/// Per-row maximum (r×1). Gradient goes to the first maximal entry.
inline Var max_cols(Var a) {
    const Matrix& v = a.value();
    Matrix out(v.rows(), 1);
    std::vector<Eigen::Index> arg(static_cast<std::size_t>(v.rows()));
    for (Eigen::Index i = 0; i < v.rows(); ++i) out(i, 0) = v.row(i).maxCoeff(&arg[static_cast<std::size_t>(i)]);
    return a.tape->record(std::move(out), {a}, [a, arg](const Matrix& g) {
        Matrix d = Matrix::Zero(a.rows(), a.cols());
        for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, arg[static_cast<std::size_t>(i)]) = g(i, 0);
        a.tape->accumulate(a, d);
    });
}

/// Per-row minimum (r×1).
inline Var min_cols(Var a) {
    const Matrix& v = a.value();
    Matrix out(v.rows(), 1);
    std::vector<Eigen::Index> arg(static_cast<std::size_t>(v.rows()));
    for (Eigen::Index i = 0; i < v.rows(); ++i) out(i, 0) = v.row(i).minCoeff(&arg[static_cast<std::size_t>(i)]);
    return a.tape->record(std::move(out), {a}, [a, arg](const Matrix& g) {
        Matrix d = Matrix::Zero(a.rows(), a.cols());
        for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, arg[static_cast<std::size_t>(i)]) = g(i, 0);
        a.tape->accumulate(a, d);
    });
}

// ---- structural -----------------------------------------------------------

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
    Matrix out = a.value().middleCols(start, count);
    return a.tape->record(std::move(out), {a}, [a, start, count](const Matrix& g) {
        Matrix d = Matrix::Zero(a.rows(), a.cols());
        d.middleCols(start, count) = g;
        a.tape->accumulate(a, d);
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const auto r = parts.front().rows();
    Eigen::Index total = 0;
    for (const Var& p : parts) {
        if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
        total += p.cols();
    }
    Matrix out(r, total);
    Eigen::Index at = 0;
    for (const Var& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return parts.front().tape->record(std::move(out), std::span<const Var>(parts), [parts](const Matrix& g) {
        Eigen::Index at = 0;
        for (const Var& p : parts) {
            p.tape->accumulate(p, g.middleCols(at, p.cols()));
            at += p.cols();
        }
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const auto c = parts.front().cols();
    Eigen::Index total = 0;
    for (const Var& p : parts) {
        if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
        total += p.rows();
    }
    Matrix out(total, c);
    Eigen::Index at = 0;
    for (const Var& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    return parts.front().tape->record(std::move(out), std::span<const Var>(parts), [parts](const Matrix& g) {
        Eigen::Index at = 0;
        for (const Var& p : parts) {
            p.tape->accumulate(p, g.middleRows(at, p.rows()));
            at += p.rows();
        }
    });
}

/// out.row(i) = a.row(index[i]); indices may repeat.
inline Var gather_rows(Var a, std::vector<int> index) {
    Matrix out(static_cast<Eigen::Index>(index.size()), a.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
    }
    return a.tape->record(std::move(out), {a}, [a, index = std::move(index)](const Matrix& g) {
        Matrix d = Matrix::Zero(a.rows(), a.cols());
        for (std::size_t i = 0; i < index.size(); ++i) d.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
        a.tape->accumulate(a, d);
    });
}

// ---- normalisation and attention pieces -----------------------------------

/// Row-wise LayerNorm with affine gain/bias (both 1×n).
inline Var layer_norm(Var x, Var gain, Var bias, double eps) {
    const Matrix& v = x.value();
    const auto n = v.cols();
    if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
        throw ShapeError("layer_norm: affine parameters must be 1x" + std::to_string(n));
    Matrix xhat(v.rows(), n);
    Eigen::VectorXd inv_std(v.rows());
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        const double mu = v.row(i).mean();
        const double var = (v.row(i).array() - mu).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (v.row(i).array() - mu) * inv_std(i);
    }
    Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
    out.rowwise() += bias.value().row(0);
    return x.tape->record(std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv_std](const Matrix& g) {
        Tape& t = *x.tape;
        const double n = static_cast<double>(xhat.cols());
        if (t.needs_grad(gain)) t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        if (t.needs_grad(bias)) t.accumulate(bias, g.colwise().sum());
        if (t.needs_grad(x)) {
            Matrix dxhat = (g.array().rowwise() * gain.value().row(0).array()).matrix();
            Matrix dx(xhat.rows(), xhat.cols());
            for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                const double s1 = dxhat.row(i).sum();
                const double s2 = dxhat.row(i).dot(xhat.row(i));
                dx.row(i) = (inv_std(i) / n) * (n * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2);
            }
            t.accumulate(x, dx);
        }
    });
}

inline Var softmax_rows(Var a) {
    const Matrix& v = a.value();
    Matrix y(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        const double m = v.row(i).maxCoeff();
        y.row(i) = (v.row(i).array() - m).exp();
        y.row(i) /= y.row(i).sum();
    }
    return a.tape->record(y, {a}, [a, y](const Matrix& g) {
        Matrix d(y.rows(), y.cols());
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            const double dot = g.row(i).dot(y.row(i));
            d.row(i) = y.row(i).array() * (g.row(i).array() - dot);
        }
        a.tape->accumulate(a, d);
    });
}

// ---- losses ---------------------------------------------------------------

/// Mean binary cross-entropy of column `logits` (n×1) against 0/1 targets,
/// computed in the numerically stable log-sum-exp form.
inline Var bce_with_logits(Var logits, const std::vector<double>& targets) {
    const Matrix& z = logits.value();
    if (z.cols() != 1 || z.rows() != static_cast<Eigen::Index>(targets.size()))
        throw ShapeError("bce_with_logits: expected " + std::to_string(targets.size()) + "x1 logits");
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double x = z(i, 0), y = targets[static_cast<std::size_t>(i)];
        total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    const double n = static_cast<double>(z.rows());
    Matrix out(1, 1);
    out(0, 0) = total / n;
    return logits.tape->record(std::move(out), {logits}, [logits, targets, n](const Matrix& g) {
        const Matrix& z = logits.value();
        Matrix d(z.rows(), 1);
        for (Eigen::Index i = 0; i < z.rows(); ++i)
            d(i, 0) = g(0, 0) * (detail::sigmoid(z(i, 0)) - targets[static_cast<std::size_t>(i)]) / n;
        logits.tape->accumulate(logits, d);
    });
}

}  // namespace cinemae::ad
