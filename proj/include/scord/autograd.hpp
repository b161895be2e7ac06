#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <vector>

// Small reverse-mode autodiff over dense double matrices. Every op builds a
// node; recording of backward closures is skipped inside a NoGrad scope, so
// inference and training share one forward code path.
namespace scord::ag {

using Matrix = Eigen::MatrixXd;

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Matrix value;
  Matrix grad;            // lazily sized on first accumulation
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;  // adds into parents' grads
  bool requires_grad = false;

  explicit Node(Matrix v) : value(std::move(v)) {}

  void accumulate(const Matrix& g) {
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
};

bool grad_enabled();

struct NoGrad {
  NoGrad();
  ~NoGrad();

 private:
  bool previous_;
};

Var constant(Matrix v);
Var parameter(Matrix v);  // requires_grad = true

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);                // same shape
Var add_rowwise(const Var& a, const Var& bias);     // bias is 1 x cols
Var add_constant(const Var& a, const Matrix& c);    // e.g. attention masks
Var scale(const Var& a, double s);
Var transpose(const Var& a);
Var slice_rows(const Var& a, int r0, int n);
Var slice_cols(const Var& a, int c0, int n);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var gather_rows(const Var& table, const std::vector<int>& indices);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var gelu(const Var& a);
Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps = 1e-6);

// Sum of -log_probs[i, targets[i]] over rows with mask[i] != 0; 1x1 result.
Var masked_nll(const Var& log_probs, const std::vector<int>& targets,
               const std::vector<uint8_t>& mask);

Var add_scalar_list(const std::vector<Var>& scalars);  // 1x1 each
Var scale_scalar(const Var& a, double s);

// Reverse pass from a root (typically 1x1); seeds the root with ones.
void backward(const Var& root);

}  // namespace scord::ag
