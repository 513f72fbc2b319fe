#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "qsv/tensor.hpp"

namespace qsv::ad {

class Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the reverse-mode graph: the forward value, a lazily
/// materialized gradient of the same shape, and a closure that scatters the
/// incoming gradient to the parents.
class Node {
public:
    Tensor data;
    Tensor grad;
    bool grad_materialized = false;
    bool requires_grad = false;
    bool backward_done = false;  // set on roots after backward()
    const char* tag = "leaf";
    std::string name;  // nonempty for named parameters
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop;  // may be empty for leaves

    Tensor& ensure_grad();
};

/// Handle to a graph node. Cheap to copy; ops build new nodes referencing
/// their inputs, so a Value keeps its whole upstream subgraph alive.
class Value {
public:
    Value() = default;
    explicit Value(NodePtr n) : node_(std::move(n)) {}

    /// Leaf that does not require gradients (inputs, masks, noise).
    static Value constant(Tensor t, const char* tag = "const");
    /// Leaf that requires gradients (trainable parameter).
    static Value param(Tensor t, std::string name);

    bool defined() const { return node_ != nullptr; }
    const Tensor& data() const { return node_->data; }
    Tensor& mutable_data() { return node_->data; }
    const Tensor& grad() const;
    bool requires_grad() const { return node_->requires_grad; }
    const Shape& shape() const { return node_->data.shape(); }
    const std::string& name() const { return node_->name; }
    NodePtr node() const { return node_; }

    void zero_grad();

private:
    NodePtr node_;
};

/// When enabled (default) every op verifies its output is finite and raises
/// a "numeric" error naming the op. Thread-local.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// ---- op set ----------------------------------------------------------------

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value scale(const Value& a, double c);

Value matmul(const Value& a, const Value& b);          // [m,k]x[k,n]
Value transpose(const Value& a);                       // 2-d
/// x viewed as [rows, in] times W [in, out] plus optional bias [out];
/// leading dims of x are preserved.
Value linear(const Value& x, const Value& w, const Value& b = Value());

Value sum_axis(const Value& x, size_t axis);
Value mean_axis(const Value& x, size_t axis);
Value sum_all(const Value& x);

Value softmax_last(const Value& x);
/// Softmax over the last axis of a square [t,t] matrix where row r only sees
/// columns 0..r; entries above the diagonal are exactly zero.
Value causal_softmax(const Value& x);
Value layernorm_last(const Value& x, const Value& gamma, const Value& beta,
                     double eps = 1e-5);
Value gelu(const Value& x);
Value tanh_act(const Value& x);

Value concat_rows(const std::vector<Value>& xs);
Value slice_rows(const Value& x, size_t start, size_t len);
Value slice_cols(const Value& x, size_t start, size_t len);  // 2-d
Value gather_rows(const Value& x, const std::vector<size_t>& idx);
Value reshape(const Value& x, Shape shape);

/// Weighted mean over axis 0: sum_i w_i * x_i / sum_i w_i. w is rank 1 with
/// one weight per row block; the weight sum must be nonzero.
Value masked_mean(const Value& x, const Value& w);

Value embedding(const Value& table, const std::vector<size_t>& ids);

/// Mean cross-entropy of logits [n, v] against target ids, over rows where
/// mask is true. At least one row must be masked in.
Value cross_entropy(const Value& logits, const std::vector<size_t>& targets,
                    const std::vector<bool>& mask);

/// Forward emits `hard`; backward passes the incoming gradient to `soft`
/// unchanged (identity surrogate).
Value straight_through(const Value& soft, Tensor hard);

/// Discounted difference accumulation along axis 0:
/// y_0 = 0, y_i = alpha*(x_i - x_{i-1}) + (1-alpha)*y_{i-1}.
Value momentum_scan(const Value& x, double alpha);

/// Cut the graph: same data, no gradient path.
Value detach(const Value& x);

// ---- engine ----------------------------------------------------------------

/// Optional destination for leaf gradients. When backward() is given a sink,
/// gradients of named parameters accumulate here instead of in the nodes,
/// letting several graphs over shared parameters run on separate threads.
struct GradSink {
    std::unordered_map<const Node*, Tensor> grads;

    Tensor& slot(const Node& n);
    void add_to(const GradSink& other);  // element-wise accumulate
};

/// Reverse pass from a scalar root. Every requires-grad node reachable from
/// the root receives its gradient; repeated calls on the same root raise a
/// "state" error.
void backward(const Value& root, GradSink* sink = nullptr);

/// Max over all parameters and elements of
/// |analytic - central_difference| / (|analytic| + |cd| + 1e-12).
/// `build` must rebuild the same scalar graph deterministically; this is
/// verified with two forward passes before differencing.
double grad_check(const std::function<Value()>& build,
                  const std::vector<Value>& params, double h = 1e-6);

}  // namespace qsv::ad
