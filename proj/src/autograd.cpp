#include "streamdit/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace streamdit::nn {

namespace {

thread_local bool t_grad_enabled = true;

Var make_result(Matrix value, std::initializer_list<const Var*> inputs, std::function<void(Node&)> fn) {
    Var out(std::move(value));
    if (!t_grad_enabled) return out;
    bool any = false;
    for (const Var* in : inputs) any = any || in->requires_grad();
    if (!any) return out;
    Node& node = *out.node();
    node.requires_grad = true;
    for (const Var* in : inputs) node.inputs.push_back(in->node());
    node.backward_fn = std::move(fn);
    return out;
}

void require(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
}

}  // namespace

void Node::accumulate(const Matrix& g) {
    if (grad.size() == 0) {
        grad = g;
    } else {
        grad += g;
    }
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

void backward(const Var& root) {
    require(root.defined() && root.rows() == 1 && root.cols() == 1, "backward: root must be a scalar");
    if (!root.requires_grad()) return;

    // iterative post-order DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && node->grad.size() != 0) node->backward_fn(*node);
    }
}

Var add(const Var& a, const Var& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    return make_result(a.value() + b.value(), {&a, &b}, [](Node& self) {
        for (auto& in : self.inputs)
            if (in->requires_grad) in->accumulate(self.grad);
    });
}

Var matmul(const Var& a, const Var& b) {
    require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
    return make_result(a.value() * b.value(), {&a, &b}, [](Node& self) {
        Node& A = *self.inputs[0];
        Node& B = *self.inputs[1];
        if (A.requires_grad) A.accumulate(self.grad * B.value.transpose());
        if (B.requires_grad) B.accumulate(A.value.transpose() * self.grad);
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    require(x.cols() == w.rows(), "linear: input width mismatch");
    require(b.rows() == 1 && b.cols() == w.cols(), "linear: bias shape");
    Matrix y = x.value() * w.value();
    y.rowwise() += b.value().row(0);
    return make_result(std::move(y), {&x, &w, &b}, [](Node& self) {
        Node& X = *self.inputs[0];
        Node& W = *self.inputs[1];
        Node& Bn = *self.inputs[2];
        if (X.requires_grad) X.accumulate(self.grad * W.value.transpose());
        if (W.requires_grad) W.accumulate(X.value.transpose() * self.grad);
        if (Bn.requires_grad) Bn.accumulate(self.grad.colwise().sum());
    });
}

Var silu(const Var& a) {
    Matrix sig = (1.0 + (-a.value().array()).exp()).inverse().matrix();
    Matrix y = (a.value().array() * sig.array()).matrix();
    return make_result(std::move(y), {&a}, [sig = std::move(sig)](Node& self) {
        Node& A = *self.inputs[0];
        const auto s = sig.array();
        A.accumulate((self.grad.array() * s * (1.0 + A.value.array() * (1.0 - s))).matrix());
    });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& a) {
    const double kC = kGeluC;
    const double kA = kGeluA;
    const auto x = a.value().array();
    // tanh through exp: Eigen vectorises exp for doubles but not tanh
    Matrix th = (1.0 - 2.0 / ((2.0 * kC * (x + kA * x.cube())).exp() + 1.0)).matrix();
    Matrix y = (0.5 * x * (1.0 + th.array())).matrix();
    return make_result(std::move(y), {&a}, [th = std::move(th), kC, kA](Node& self) {
        Node& A = *self.inputs[0];
        const auto xa = A.value.array();
        const auto t = th.array();
        auto d = 0.5 * (1.0 + t) + 0.5 * xa * (1.0 - t.square()) * kC * (1.0 + 3.0 * kA * xa.square());
        A.accumulate((self.grad.array() * d).matrix());
    });
}

Var layer_norm(const Var& a, double eps) {
    const Eigen::Index n = a.cols();
    Eigen::VectorXd mean = a.value().rowwise().mean();
    Matrix centered = a.value().colwise() - mean;
    Eigen::VectorXd inv = ((centered.array().square().rowwise().sum() / static_cast<double>(n)) + eps).rsqrt().matrix();
    Matrix y = inv.asDiagonal() * centered;
    Matrix y_saved = y;
    return make_result(std::move(y), {&a}, [y = std::move(y_saved), inv = std::move(inv)](Node& self) {
        const double cols = static_cast<double>(self.grad.cols());
        Eigen::VectorXd g_mean = self.grad.rowwise().sum() / cols;
        Eigen::VectorXd gy_mean = (self.grad.array() * y.array()).rowwise().sum().matrix() / cols;
        Matrix dx = self.grad;
        dx.colwise() -= g_mean;
        dx -= gy_mean.asDiagonal() * y;
        self.inputs[0]->accumulate(inv.asDiagonal() * dx);
    });
}

// Group kernels run column by column so the inner loop walks contiguous rows.
Var modulate(const Var& x, const Var& shift, const Var& scale, int rows_per_group) {
    require(rows_per_group > 0 && x.rows() == shift.rows() * rows_per_group, "modulate: group layout mismatch");
    require(shift.rows() == scale.rows() && shift.cols() == x.cols() && scale.cols() == x.cols(),
            "modulate: shift/scale shape mismatch");
    const Eigen::Index rows = x.rows();
    const Eigen::Index groups = shift.rows();
    Matrix y(rows, x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double* xc = x.value().col(c).data();
        double* yc = y.col(c).data();
        for (Eigen::Index g = 0; g < groups; ++g) {
            const double a = 1.0 + scale.value()(g, c);
            const double b = shift.value()(g, c);
            for (Eigen::Index r = g * rows_per_group; r < (g + 1) * rows_per_group; ++r) yc[r] = xc[r] * a + b;
        }
    }
    return make_result(std::move(y), {&x, &shift, &scale}, [rows_per_group](Node& self) {
        Node& X = *self.inputs[0];
        Node& Sh = *self.inputs[1];
        Node& Sc = *self.inputs[2];
        const Eigen::Index groups = Sh.value.rows();
        Matrix dx;
        if (X.requires_grad) dx.resize(X.value.rows(), X.value.cols());
        Matrix dshift(groups, Sh.value.cols());
        Matrix dscale(groups, Sc.value.cols());
        for (Eigen::Index c = 0; c < X.value.cols(); ++c) {
            const double* gc = self.grad.col(c).data();
            const double* xc = X.value.col(c).data();
            for (Eigen::Index g = 0; g < groups; ++g) {
                const double a = 1.0 + Sc.value(g, c);
                double sum = 0.0;
                double dot = 0.0;
                for (Eigen::Index r = g * rows_per_group; r < (g + 1) * rows_per_group; ++r) {
                    sum += gc[r];
                    dot += gc[r] * xc[r];
                    if (X.requires_grad) dx(r, c) = gc[r] * a;
                }
                dshift(g, c) = sum;
                dscale(g, c) = dot;
            }
        }
        if (X.requires_grad) X.accumulate(dx);
        if (Sh.requires_grad) Sh.accumulate(dshift);
        if (Sc.requires_grad) Sc.accumulate(dscale);
    });
}

Var scale_groups(const Var& x, const Var& gate, int rows_per_group) {
    require(rows_per_group > 0 && x.rows() == gate.rows() * rows_per_group && gate.cols() == x.cols(),
            "scale_groups: group layout mismatch");
    const Eigen::Index groups = gate.rows();
    Matrix y(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double* xc = x.value().col(c).data();
        double* yc = y.col(c).data();
        for (Eigen::Index g = 0; g < groups; ++g) {
            const double a = gate.value()(g, c);
            for (Eigen::Index r = g * rows_per_group; r < (g + 1) * rows_per_group; ++r) yc[r] = xc[r] * a;
        }
    }
    return make_result(std::move(y), {&x, &gate}, [rows_per_group](Node& self) {
        Node& X = *self.inputs[0];
        Node& G = *self.inputs[1];
        const Eigen::Index groups = G.value.rows();
        Matrix dx;
        if (X.requires_grad) dx.resize(X.value.rows(), X.value.cols());
        Matrix dgate(groups, G.value.cols());
        for (Eigen::Index c = 0; c < X.value.cols(); ++c) {
            const double* gc = self.grad.col(c).data();
            const double* xc = X.value.col(c).data();
            for (Eigen::Index g = 0; g < groups; ++g) {
                const double a = G.value(g, c);
                double dot = 0.0;
                for (Eigen::Index r = g * rows_per_group; r < (g + 1) * rows_per_group; ++r) {
                    dot += gc[r] * xc[r];
                    if (X.requires_grad) dx(r, c) = gc[r] * a;
                }
                dgate(g, c) = dot;
            }
        }
        if (X.requires_grad) X.accumulate(dx);
        if (G.requires_grad) G.accumulate(dgate);
    });
}

Var columns(const Var& a, int start, int count) {
    require(start >= 0 && count >= 0 && start + count <= a.cols(), "columns: range outside matrix");
    return make_result(a.value().middleCols(start, count), {&a}, [start, count](Node& self) {
        Node& A = *self.inputs[0];
        Matrix g = Matrix::Zero(A.value.rows(), A.value.cols());
        g.middleCols(start, count) = self.grad;
        A.accumulate(g);
    });
}

Var gather_rows(const Var& table, std::vector<int> index) {
    Matrix y(static_cast<Eigen::Index>(index.size()), table.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        require(index[i] >= 0 && index[i] < table.rows(), "gather_rows: index out of range");
        y.row(static_cast<Eigen::Index>(i)) = table.value().row(index[i]);
    }
    return make_result(std::move(y), {&table}, [index = std::move(index)](Node& self) {
        Node& T = *self.inputs[0];
        Matrix g = Matrix::Zero(T.value.rows(), T.value.cols());
        for (std::size_t i = 0; i < index.size(); ++i) g.row(index[i]) += self.grad.row(static_cast<Eigen::Index>(i));
        T.accumulate(g);
    });
}

Var permute(const Var& a, std::vector<int> source, int rows, int cols) {
    require(static_cast<Eigen::Index>(source.size()) == a.value().size() &&
                static_cast<Eigen::Index>(rows) * cols == a.value().size(),
            "permute: index map size mismatch");
    Matrix y(rows, cols);
    const double* src = a.value().data();
    double* dst = y.data();
    for (std::size_t k = 0; k < source.size(); ++k) dst[k] = src[source[k]];
    return make_result(std::move(y), {&a}, [source = std::move(source)](Node& self) {
        Node& A = *self.inputs[0];
        Matrix g(A.value.rows(), A.value.cols());
        double* gd = g.data();
        const double* sd = self.grad.data();
        for (std::size_t k = 0; k < source.size(); ++k) gd[source[k]] = sd[k];
        A.accumulate(g);
    });
}

Var scale_rows(const Var& a, Eigen::VectorXd factors) {
    require(factors.size() == a.rows(), "scale_rows: factor count mismatch");
    Matrix y = factors.asDiagonal() * a.value();
    return make_result(std::move(y), {&a}, [factors = std::move(factors)](Node& self) {
        self.inputs[0]->accumulate(factors.asDiagonal() * self.grad);
    });
}

Var masked_mse(const Var& pred, const Matrix& target, std::vector<bool> row_mask) {
    require(pred.rows() == target.rows() && pred.cols() == target.cols(), "masked_mse: shape mismatch");
    require(static_cast<Eigen::Index>(row_mask.size()) == pred.rows(), "masked_mse: mask length mismatch");
    Matrix diff = pred.value() - target;
    double sum = 0.0;
    Eigen::Index kept = 0;
    for (Eigen::Index r = 0; r < diff.rows(); ++r) {
        if (!row_mask[static_cast<std::size_t>(r)]) {
            diff.row(r).setZero();
            continue;
        }
        sum += diff.row(r).squaredNorm();
        ++kept;
    }
    require(kept > 0, "masked_mse: mask excludes every row");
    const double count = static_cast<double>(kept * diff.cols());
    Matrix value(1, 1);
    value(0, 0) = sum / count;
    return make_result(std::move(value), {&pred}, [diff = std::move(diff), count](Node& self) {
        self.inputs[0]->accumulate(diff * (2.0 * self.grad(0, 0) / count));
    });
}

Matrix attend(const Matrix& q, const Matrix& k, const Matrix& v, const WindowGroups& groups, int heads) {
    require(heads > 0 && q.cols() % heads == 0, "attend: width not divisible by heads");
    require(q.rows() == k.rows() && q.rows() == v.rows() && q.cols() == k.cols() && q.cols() == v.cols(),
            "attend: q/k/v shape mismatch");
    const int dh = static_cast<int>(q.cols()) / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix out = Matrix::Zero(q.rows(), q.cols());
    for (const auto& idx : groups) {
        const Matrix qw = q(idx, Eigen::all);
        const Matrix kw = k(idx, Eigen::all);
        const Matrix vw = v(idx, Eigen::all);
        Matrix ow(qw.rows(), qw.cols());
        for (int h = 0; h < heads; ++h) {
            Matrix s = qw.middleCols(h * dh, dh) * kw.middleCols(h * dh, dh).transpose() * scale;
            Eigen::VectorXd mx = s.rowwise().maxCoeff();
            s = (s.colwise() - mx).array().exp().matrix();
            Eigen::VectorXd z = s.rowwise().sum();
            s = z.cwiseInverse().asDiagonal() * s;
            ow.middleCols(h * dh, dh) = s * vw.middleCols(h * dh, dh);
        }
        out(idx, Eigen::all) = ow;
    }
    return out;
}

Var window_attention(const Var& qkv, std::shared_ptr<const WindowGroups> groups, int heads) {
    require(qkv.cols() % 3 == 0, "window_attention: qkv width must be 3 * dim");
    const int d = static_cast<int>(qkv.cols()) / 3;
    require(heads > 0 && d % heads == 0, "window_attention: dim not divisible by heads");
    const int dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const Matrix& all = qkv.value();
    const bool keep = grad_enabled() && qkv.requires_grad();

    Matrix out(all.rows(), d);
    std::vector<Matrix> probs;
    if (keep) probs.reserve(groups->size() * static_cast<std::size_t>(heads));
    for (const auto& idx : *groups) {
        const Matrix w = all(idx, Eigen::all);
        Matrix ow(w.rows(), d);
        for (int h = 0; h < heads; ++h) {
            Matrix s = w.middleCols(h * dh, dh) * w.middleCols(d + h * dh, dh).transpose() * scale;
            Eigen::VectorXd mx = s.rowwise().maxCoeff();
            s = (s.colwise() - mx).array().exp().matrix();
            Eigen::VectorXd z = s.rowwise().sum();
            s = z.cwiseInverse().asDiagonal() * s;
            ow.middleCols(h * dh, dh) = s * w.middleCols(2 * d + h * dh, dh);
            if (keep) probs.push_back(std::move(s));
        }
        out(idx, Eigen::all) = ow;
    }

    return make_result(std::move(out), {&qkv}, [groups, heads, d, dh, scale, probs = std::move(probs)](Node& self) {
        Node& in = *self.inputs[0];
        Matrix g = Matrix::Zero(in.value.rows(), in.value.cols());
        std::size_t p = 0;
        for (const auto& idx : *groups) {
            const Matrix w = in.value(idx, Eigen::all);
            const Matrix gw = self.grad(idx, Eigen::all);
            Matrix dw = Matrix::Zero(w.rows(), w.cols());
            for (int h = 0; h < heads; ++h) {
                const Matrix& P = probs[p++];
                const auto qh = w.middleCols(h * dh, dh);
                const auto kh = w.middleCols(d + h * dh, dh);
                const auto vh = w.middleCols(2 * d + h * dh, dh);
                const auto go = gw.middleCols(h * dh, dh);
                dw.middleCols(2 * d + h * dh, dh) = P.transpose() * go;
                Matrix dp = go * vh.transpose();
                Eigen::VectorXd row_dot = (dp.array() * P.array()).rowwise().sum();
                Matrix ds = (P.array() * (dp.colwise() - row_dot).array()).matrix() * scale;
                dw.middleCols(h * dh, dh) = ds * kh;
                dw.middleCols(d + h * dh, dh) = ds.transpose() * qh;
            }
            g(idx, Eigen::all) = dw;
        }
        in.accumulate(g);
    });
}

ParameterStore::ParameterStore(const ParameterStore& other) {
    params_.reserve(other.params_.size());
    for (const auto& p : other.params_) params_.push_back({p.name, Var(p.var.value(), true)});
}

ParameterStore& ParameterStore::operator=(const ParameterStore& other) {
    if (this != &other) {
        ParameterStore copy(other);
        *this = std::move(copy);
    }
    return *this;
}

int ParameterStore::add(std::string name, Matrix init) {
    params_.push_back({std::move(name), Var(std::move(init), true)});
    return static_cast<int>(params_.size()) - 1;
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.var.value().size());
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
}

int ParameterStore::find(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
        if (params_[i].name == name) return static_cast<int>(i);
    return -1;
}

Adam::Adam(double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(ParameterStore& params) {
    auto& all = params.all();
    if (m_.empty()) {
        for (const auto& p : all) {
            m_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
            v_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
        }
    }
    if (m_.size() != all.size()) throw std::logic_error("Adam: parameter set changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < all.size(); ++i) {
        const Matrix& g = all[i].var.grad();
        if (g.size() == 0) continue;
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
        all[i].var.mutable_value().array() -=
            lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
}

}  // namespace streamdit::nn
