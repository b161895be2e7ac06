#include "scord/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace scord::ag {

namespace {

bool g_grad_enabled = true;

Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  auto node = std::make_shared<Node>(std::move(value));
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backprop = std::move(backprop);
    }
  }
  return node;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGrad::NoGrad() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGrad::~NoGrad() { g_grad_enabled = previous_; }

Var constant(Matrix v) { return std::make_shared<Node>(std::move(v)); }

Var parameter(Matrix v) {
  auto node = std::make_shared<Node>(std::move(v));
  node->requires_grad = true;
  return node;
}

Var matmul(const Var& a, const Var& b) {
  return make_op(a->value * b->value, {a, b}, [](Node& n) {
    auto& a = *n.parents[0];
    auto& b = *n.parents[1];
    if (a.requires_grad) a.accumulate(n.grad * b.value.transpose());
    if (b.requires_grad) b.accumulate(a.value.transpose() * n.grad);
  });
}

Var add(const Var& a, const Var& b) {
  return make_op(a->value + b->value, {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) n.parents[1]->accumulate(n.grad);
  });
}

Var add_rowwise(const Var& a, const Var& bias) {
  Matrix v = a->value;
  v.rowwise() += bias->value.row(0);
  return make_op(std::move(v), {a, bias}, [](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) n.parents[1]->accumulate(n.grad.colwise().sum());
  });
}

Var add_constant(const Var& a, const Matrix& c) {
  return make_op(a->value + c, {a},
                 [](Node& n) { n.parents[0]->accumulate(n.grad); });
}

Var scale(const Var& a, double s) {
  return make_op(a->value * s, {a},
                 [s](Node& n) { n.parents[0]->accumulate(n.grad * s); });
}

Var transpose(const Var& a) {
  return make_op(a->value.transpose(), {a},
                 [](Node& n) { n.parents[0]->accumulate(n.grad.transpose()); });
}

Var slice_rows(const Var& a, int r0, int n_rows) {
  return make_op(a->value.middleRows(r0, n_rows), {a}, [r0, n_rows](Node& n) {
    Matrix g = Matrix::Zero(n.parents[0]->value.rows(), n.parents[0]->value.cols());
    g.middleRows(r0, n_rows) = n.grad;
    n.parents[0]->accumulate(g);
  });
}

Var slice_cols(const Var& a, int c0, int n_cols) {
  return make_op(a->value.middleCols(c0, n_cols), {a}, [c0, n_cols](Node& n) {
    Matrix g = Matrix::Zero(n.parents[0]->value.rows(), n.parents[0]->value.cols());
    g.middleCols(c0, n_cols) = n.grad;
    n.parents[0]->accumulate(g);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  Eigen::Index rows = 0;
  for (const auto& p : parts) rows += p->value.rows();
  Matrix v(rows, parts[0]->value.cols());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    v.middleRows(r, p->value.rows()) = p->value;
    r += p->value.rows();
  }
  return make_op(std::move(v), parts, [](Node& n) {
    Eigen::Index r = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad) p->accumulate(n.grad.middleRows(r, p->value.rows()));
      r += p->value.rows();
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  Eigen::Index cols = 0;
  for (const auto& p : parts) cols += p->value.cols();
  Matrix v(parts[0]->value.rows(), cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    v.middleCols(c, p->value.cols()) = p->value;
    c += p->value.cols();
  }
  return make_op(std::move(v), parts, [](Node& n) {
    Eigen::Index c = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad) p->accumulate(n.grad.middleCols(c, p->value.cols()));
      c += p->value.cols();
    }
  });
}

Var gather_rows(const Var& table, const std::vector<int>& indices) {
  Matrix v(static_cast<Eigen::Index>(indices.size()), table->value.cols());
  for (size_t i = 0; i < indices.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = table->value.row(indices[i]);
  return make_op(std::move(v), {table}, [indices](Node& n) {
    Matrix g = Matrix::Zero(n.parents[0]->value.rows(), n.parents[0]->value.cols());
    for (size_t i = 0; i < indices.size(); ++i)
      g.row(indices[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    n.parents[0]->accumulate(g);
  });
}

Var softmax_rows(const Var& a) {
  Matrix y = a->value;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    double m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  return make_op(y, {a}, [y](Node& n) {
    Matrix dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      double dot = n.grad.row(r).dot(y.row(r));
      dx.row(r) = (y.row(r).array() * (n.grad.row(r).array() - dot)).matrix();
    }
    n.parents[0]->accumulate(dx);
  });
}

Var log_softmax_rows(const Var& a) {
  Matrix y = a->value;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    double m = y.row(r).maxCoeff();
    double lse = m + std::log((y.row(r).array() - m).exp().sum());
    y.row(r).array() -= lse;
  }
  return make_op(y, {a}, [y](Node& n) {
    Matrix dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      double gsum = n.grad.row(r).sum();
      dx.row(r) = n.grad.row(r) - gsum * y.row(r).array().exp().matrix();
    }
    n.parents[0]->accumulate(dx);
  });
}

Var gelu(const Var& a) {
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  Matrix y = a->value.unaryExpr(
      [&](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
  return make_op(std::move(y), {a}, [inv_sqrt2](Node& n) {
    const Matrix& x = n.parents[0]->value;
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    Matrix d = x.unaryExpr([&](double v) {
      return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
    });
    n.parents[0]->accumulate(n.grad.cwiseProduct(d));
  });
}

Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps) {
  const Matrix& x = a->value;
  const Eigen::Index cols = x.cols();
  Matrix xhat(x.rows(), cols);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mu = x.row(r).mean();
    double var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Matrix y = xhat;
  y.array().rowwise() *= gain->value.row(0).array();
  y.rowwise() += bias->value.row(0);
  return make_op(std::move(y), {a, gain, bias}, [xhat, inv_std, cols](Node& n) {
    auto& a = *n.parents[0];
    auto& gain = *n.parents[1];
    auto& bias = *n.parents[2];
    if (gain.requires_grad) gain.accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
    if (bias.requires_grad) bias.accumulate(n.grad.colwise().sum());
    if (a.requires_grad) {
      Matrix dx(xhat.rows(), cols);
      for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
        Eigen::RowVectorXd dxhat =
            n.grad.row(r).cwiseProduct(gain.value.row(0));
        double m1 = dxhat.mean();
        double m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
        dx.row(r) =
            inv_std(r) * (dxhat.array() - m1 - xhat.row(r).array() * m2).matrix();
      }
      a.accumulate(dx);
    }
  });
}

Var masked_nll(const Var& log_probs, const std::vector<int>& targets,
               const std::vector<uint8_t>& mask) {
  if (targets.size() != mask.size() ||
      static_cast<Eigen::Index>(targets.size()) != log_probs->value.rows())
    throw std::invalid_argument("masked_nll: shape mismatch");
  double total = 0;
  for (size_t i = 0; i < targets.size(); ++i)
    if (mask[i]) total -= log_probs->value(static_cast<Eigen::Index>(i), targets[i]);
  Matrix v(1, 1);
  v(0, 0) = total;
  return make_op(std::move(v), {log_probs}, [targets, mask](Node& n) {
    double g = n.grad(0, 0);
    Matrix dlp = Matrix::Zero(n.parents[0]->value.rows(), n.parents[0]->value.cols());
    for (size_t i = 0; i < targets.size(); ++i)
      if (mask[i]) dlp(static_cast<Eigen::Index>(i), targets[i]) -= g;
    n.parents[0]->accumulate(dlp);
  });
}

Var add_scalar_list(const std::vector<Var>& scalars) {
  Matrix v(1, 1);
  v(0, 0) = 0;
  for (const auto& s : scalars) v(0, 0) += s->value(0, 0);
  return make_op(std::move(v), scalars, [](Node& n) {
    for (auto& p : n.parents)
      if (p->requires_grad) p->accumulate(n.grad);
  });
}

Var scale_scalar(const Var& a, double s) { return scale(a, s); }

void backward(const Var& root) {
  // Post-order over the recorded graph, then run backprop in reverse.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !seen.count(parent)) {
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad = Matrix::Ones(root->value.rows(), root->value.cols());
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && node->grad.size() != 0) node->backprop(*node);
  }
}

}  // namespace scord::ag
