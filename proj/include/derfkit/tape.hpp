#pragma once

#include "derfkit/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace derfkit {

// Handle to a node on a Tape. Plain index; cheap to copy.
struct Var {
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::size_t idx = npos;
    bool valid() const noexcept { return idx != npos; }
};

using ScalarFn = std::function<double(double)>;

// Define-by-run reverse-mode tape. Nodes are appended in execution order,
// so the node list is already a topological order; backward() walks it in
// reverse. A tape records one forward pass and is rebuilt per step.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // --- leaves ------------------------------------------------------
    Var leaf(Tensor value, bool requires_grad);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    // --- access ------------------------------------------------------
    const Tensor& value(Var v) const;
    // Gradient of the last backward() pass. Errors if the node does not
    // require gradients or backward has not run.
    const Tensor& grad(Var v) const;
    bool requires_grad(Var v) const;
    std::size_t size() const noexcept { return nodes_.size(); }

    // --- primitive ops -----------------------------------------------
    Var matmul(Var a, Var b);     // [m,k] @ [k,n] -> [m,n]
    Var matmul_nt(Var a, Var b);  // [m,k] @ [n,k]^T -> [m,n]
    Var bmm(Var a, Var b);        // [N,m,k] @ [N,k,n] -> [N,m,n]
    Var bmm_nt(Var a, Var b);     // [N,m,k] @ [N,n,k]^T -> [N,m,n]
    Var add(Var a, Var b);        // same shape
    Var sub(Var a, Var b);        // same shape
    Var mul(Var a, Var b);        // elementwise, same shape
    Var add_rowvec(Var x, Var v); // [..., C] + [C] broadcast over trailing axis
    Var mul_rowvec(Var x, Var v); // [..., C] * [C]
    Var scale(Var x, double c);
    Var reshape(Var x, Shape new_shape);
    Var transpose2d(Var x);       // [m,n] -> [n,m]
    Var softmax_lastdim(Var x);
    Var unary(Var x, const ScalarFn& f, const ScalarFn& df, std::string name = "unary");
    Var sum(Var x);               // -> scalar
    Var mean_all(Var x);          // -> scalar

    // Gather rows of a [V, C] table; backward scatter-adds.
    Var gather_rows(Var table, std::vector<std::size_t> indices);
    // [G*group, C] -> [G, C], mean over each consecutive group of rows.
    Var mean_rows(Var x, std::size_t group);
    // Multiply row r of x by factors[r]; factors is a plain constant
    // (used for stochastic-depth masks).
    Var scale_rows(Var x, std::vector<double> factors);
    // [B*T, H*dh] -> [B*H, T, dh] and back; pure index permutations.
    Var split_heads(Var x, std::size_t batch, std::size_t seq, std::size_t heads);
    Var merge_heads(Var x, std::size_t batch, std::size_t seq, std::size_t heads);

    // --- fused layer ops ----------------------------------------------
    // Per-row standardization over the trailing axis (population variance),
    // then y = gamma * xhat + beta.
    Var layer_norm(Var x, Var gamma, Var beta, double epsilon);
    // y = gamma * x / sqrt(mean(x^2) + eps) [+ beta when valid()].
    Var rms_norm(Var x, Var gamma, Var beta, double epsilon);
    // y = gamma_c * f(alpha * x + shift) + beta_c. alpha is a scalar leaf;
    // shift may be a scalar leaf, a per-channel vector, or invalid (absent).
    Var dynamic_pointwise(Var x, Var alpha, Var shift, Var gamma, Var beta,
                          const ScalarFn& f, const ScalarFn& df,
                          std::string name = "dynamic_pointwise");
    // Mean cross-entropy of logits [B, K] against integer labels; returns a
    // scalar. Log-sum-exp stabilized.
    Var softmax_cross_entropy(Var logits, std::vector<std::int64_t> labels);

    // --- custom nodes ---------------------------------------------------
    // Register an externally computed node. `backward` receives the tape and
    // the node's own index; it must route adjoints into the parents via
    // grad_buffer().
    Var custom(std::string op, Tensor value, std::vector<Var> parents,
               std::function<void(Tape&, std::size_t)> backward);

    // Adjoint accumulation buffer for a node (valid during backward).
    Tensor& grad_buffer(std::size_t idx);
    const Tensor& node_value(std::size_t idx) const { return nodes_[idx].value; }

    // Seeds d(loss)/d(loss)=1 and sweeps the tape in reverse. Requires a
    // scalar loss; resets all adjoints first, so repeated calls are
    // bit-identical.
    void backward(Var loss);

private:
    struct Node {
        Tensor value;
        Tensor adjoint;
        bool requires_grad = false;
        bool adjoint_live = false;
        std::string op;
        std::vector<std::size_t> parents;
        std::function<void(Tape&, std::size_t)> back;
    };

    std::vector<Node> nodes_;
    bool backward_done_ = false;

    const Node& node_at(Var v, const char* ctx) const;
    bool any_requires(const std::vector<Var>& vs) const;
    Var record(std::string op, Tensor value, std::vector<Var> parents,
               std::function<void(Tape&, std::size_t)> back);
    void add_into(std::size_t idx, const Tensor& contribution);
};

} // namespace derfkit
