#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include <corrprune/common.hpp>

namespace corrprune {

// Byte accounting for every tensor buffer; measurement windows are opened
// with reset(). Single-threaded by design, plain statics are fine.
struct AllocStats {
  static inline uint64_t current_bytes = 0;
  static inline uint64_t peak_bytes = 0;
  static inline uint64_t largest_block = 0;
  static inline uint64_t n_allocs = 0;

  static void reset() {
    peak_bytes = current_bytes;
    largest_block = 0;
    n_allocs = 0;
  }
  static void on_alloc(uint64_t b) {
    current_bytes += b;
    if (current_bytes > peak_bytes) peak_bytes = current_bytes;
    if (b > largest_block) largest_block = b;
    ++n_allocs;
  }
  static void on_free(uint64_t b) { current_bytes -= b; }
};

struct Buffer {
  std::vector<double> v;
  explicit Buffer(size_t n) : v(n) { AllocStats::on_alloc(uint64_t(n) * 8); }
  Buffer(const Buffer&) = delete;
  Buffer& operator=(const Buffer&) = delete;
  ~Buffer() { AllocStats::on_free(uint64_t(v.size()) * 8); }
};
using BufPtr = std::shared_ptr<Buffer>;

inline bool& grad_mode() {
  static bool on = true;
  return on;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

// Post-op finite scan; NaN/Inf surfaces as an error at the op that made it.
inline bool& finite_checks() {
  static bool on = true;
  return on;
}

class Tensor;

struct Node {
  std::vector<int64_t> shape;
  BufPtr val;
  BufPtr grad;  // lazily allocated; views alias their parent's buffer
  bool requires_grad = false;
  bool is_view = false;
  std::vector<Tensor> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val = std::make_shared<Buffer>(size_t(n->numel()));
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor from(std::vector<double> data, std::vector<int64_t> shape,
                     bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    CP_CHECK(int64_t(data.size()) == t.numel(), "from: data/shape mismatch");
    t.n_->val->v = std::move(data);
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({v}, {1}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  Node* node() const { return n_.get(); }
  std::shared_ptr<Node> handle() const { return n_; }

  const std::vector<int64_t>& shape() const { return n_->shape; }
  int64_t numel() const { return n_->numel(); }
  int64_t rank() const { return int64_t(n_->shape.size()); }
  int64_t rows() const {
    CP_CHECK(rank() == 2, "rows() needs rank-2, got " << rank());
    return n_->shape[0];
  }
  int64_t cols() const {
    CP_CHECK(rank() == 2, "cols() needs rank-2");
    return n_->shape[1];
  }
  int64_t dim(int i) const { return n_->shape[size_t(i)]; }

  double* data() { return n_->val->v.data(); }
  const double* data() const { return n_->val->v.data(); }
  double at(int64_t i) const { return n_->val->v[size_t(i)]; }
  double at(int64_t r, int64_t c) const {
    return n_->val->v[size_t(r * cols() + c)];
  }
  double item() const {
    CP_CHECK(numel() == 1, "item() on non-scalar");
    return n_->val->v[0];
  }

  bool requires_grad() const { return n_->requires_grad; }

  const double* grad() const {
    CP_CHECK(n_->grad != nullptr, "grad not populated (run backward first)");
    return n_->grad->v.data();
  }
  bool has_grad() const { return n_->grad != nullptr; }

  void zero_grad() {
    if (n_->grad) std::fill(n_->grad->v.begin(), n_->grad->v.end(), 0.0);
  }

  // Leaf sharing this value buffer, cut out of the graph.
  Tensor detach() const {
    auto n = std::make_shared<Node>();
    n->shape = n_->shape;
    n->val = n_->val;
    n->requires_grad = false;
    n->op = "detach";
    return Tensor(n);
  }

  static void ensure_grad(Node* n) {
    if (n->grad) return;
    if (n->is_view) {
      Node* p = n->parents[0].node();
      ensure_grad(p);
      n->grad = p->grad;
      return;
    }
    n->grad = std::make_shared<Buffer>(size_t(n->numel()));
  }

  // Reverse pass from a scalar root. Grads accumulate into every reachable
  // requires_grad node; leaves keep them until zero_grad().
  void backward() const {
    CP_CHECK(numel() == 1, "backward root must be scalar");
    CP_CHECK(n_->requires_grad, "backward on a non-grad tensor");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& top = stack.back();
      Node* n = top.first;
      if (top.second < n->parents.size()) {
        Node* p = n->parents[top.second].node();
        ++top.second;
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    ensure_grad(n_.get());
    n_->grad->v[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward) (*it)->backward(**it);
    }
  }

 private:
  std::shared_ptr<Node> n_;
};

// Op-construction helpers shared by ops.hpp.
inline Tensor make_op(const char* name, std::vector<int64_t> shape,
                      std::vector<Tensor> parents) {
  bool rg = false;
  if (grad_mode()) {
    for (const Tensor& p : parents)
      if (p.requires_grad()) rg = true;
  }
  Tensor t = Tensor::zeros(std::move(shape), rg);
  t.node()->op = name;
  if (rg) t.node()->parents = std::move(parents);
  return t;
}

inline void finalize_op(Tensor& t) {
  if (finite_checks()) {
    CP_CHECK(all_finite(t.data(), size_t(t.numel())),
             "non-finite output of op '" << t.node()->op << "'");
  }
}

// Grad pointer of a parent inside a backward closure; null if it takes none.
inline double* grad_sink(const Tensor& p) {
  if (!p.requires_grad()) return nullptr;
  Tensor::ensure_grad(p.node());
  return p.node()->grad->v.data();
}

}  // namespace corrprune
