#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

// Minimal reverse-mode differentiation over dense matrices. Ops are coarse
// (matmul, layer norm, fused window attention) so graph bookkeeping stays
// small next to the arithmetic.
namespace streamdit::nn {

using Matrix = Eigen::MatrixXd;

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Matrix& g);
};

class Var {
public:
    Var() = default;
    explicit Var(Matrix value, bool requires_grad = false);

    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    void zero_grad() { node_->grad.resize(0, 0); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    bool defined() const { return static_cast<bool>(node_); }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Disables graph construction on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Back-propagates from a 1x1 root, accumulating into every reachable leaf.
void backward(const Var& root);

Var add(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
/// x w + b with b a single row broadcast over rows.
Var linear(const Var& x, const Var& w, const Var& b);
Var silu(const Var& a);
Var gelu(const Var& a);  // tanh approximation
/// Per-row normalisation without affine parameters.
Var layer_norm(const Var& a, double eps = 1e-6);
/// Row r of x uses row r / rows_per_group of shift and scale: x (1 + scale) + shift.
Var modulate(const Var& x, const Var& shift, const Var& scale, int rows_per_group);
/// Row r of x multiplied elementwise by row r / rows_per_group of gate.
Var scale_groups(const Var& x, const Var& gate, int rows_per_group);
Var columns(const Var& a, int start, int count);
Var gather_rows(const Var& table, std::vector<int> index);
/// out.data()[k] = a.data()[source[k]] for a bijective index map.
Var permute(const Var& a, std::vector<int> source, int rows, int cols);
/// Row r scaled by the constant factors[r].
Var scale_rows(const Var& a, Eigen::VectorXd factors);
/// Mean squared error over the rows whose mask entry is set.
Var masked_mse(const Var& pred, const Matrix& target, std::vector<bool> row_mask);

/// Token rows grouped into attention windows; tokens only attend within their group.
using WindowGroups = std::vector<std::vector<int>>;

/// Multi-head attention over qkv = [q | k | v] (each `heads * head_dim` wide),
/// restricted to the given windows. Returns [rows, heads * head_dim].
Var window_attention(const Var& qkv, std::shared_ptr<const WindowGroups> groups, int heads);

/// Forward-only kernel shared by the op above and by callers without a graph.
Matrix attend(const Matrix& q, const Matrix& k, const Matrix& v, const WindowGroups& groups, int heads);

struct Parameter {
    std::string name;
    Var var;
};

/// Owns named trainable leaves. Copies are deep.
class ParameterStore {
public:
    ParameterStore() = default;
    ParameterStore(const ParameterStore& other);
    ParameterStore& operator=(const ParameterStore& other);
    ParameterStore(ParameterStore&&) noexcept = default;
    ParameterStore& operator=(ParameterStore&&) noexcept = default;

    int add(std::string name, Matrix init);
    const Var& operator[](int index) const { return params_[static_cast<std::size_t>(index)].var; }
    Var& operator[](int index) { return params_[static_cast<std::size_t>(index)].var; }

    std::vector<Parameter>& all() { return params_; }
    const std::vector<Parameter>& all() const { return params_; }
    std::size_t scalar_count() const;
    void zero_grad();
    int find(const std::string& name) const;

private:
    std::vector<Parameter> params_;
};

/// Adam with bias correction; owns its moment estimates.
class Adam {
public:
    explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void step(ParameterStore& params);
    void set_learning_rate(double lr) { lr_ = lr; }
    double learning_rate() const { return lr_; }
    long steps() const { return t_; }

private:
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    long t_ = 0;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
};

}  // namespace streamdit::nn
