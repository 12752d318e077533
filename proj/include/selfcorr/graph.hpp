#pragma once

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "selfcorr/tensor.hpp"

namespace selfcorr::ad {

using NodeId = int;

enum class Op {
    Placeholder,
    Parameter,
    Constant,
    Add,
    Sub,
    Scale,       // elementwise multiply by a compile-time constant
    Mul,         // elementwise
    MatMul,
    Embed,       // row gather from a table by fixed indices
    LogSoftmax,  // row-wise, max-subtracted
    GatherLogProb,  // pick [start_row + k, ids[k]] from a (T x V) log-softmax
    Sum,
    Mean,
    Tanh,
    Softplus,    // log(1 + exp(x)), stable
    ConcatRows,
    RmsNorm,     // inputs: x (T x d), gain (d); eps fixed
    CausalAttention,  // inputs: q, k, v (T x d each); aux: n_heads
};

const char* op_name(Op op);

struct GraphError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Retained-mode reverse-AD tape. Build once, then forward() any number of
// times with fresh bindings; backward() fills per-node grads and exposes
// parameter gradients by name.
class Graph {
public:
    struct Node {
        Op op = Op::Constant;
        NodeId a = -1;
        NodeId b = -1;
        std::string name;          // placeholders/parameters only
        std::vector<int> indices;  // Embed / GatherLogProb
        int start_row = 0;         // GatherLogProb
        double scale = 1.0;        // Scale
        int n_heads = 1;           // CausalAttention
        Tensor value;
        Tensor grad;
        bool has_grad = false;
        std::vector<double> scratch;  // attention weights saved in forward
    };

    using Bindings = std::map<std::string, const Tensor*>;

    NodeId placeholder(const std::string& name, std::vector<std::size_t> shape);
    NodeId parameter(const std::string& name, std::vector<std::size_t> shape);
    NodeId constant(Tensor value);
    NodeId constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId scale(NodeId a, double c);
    NodeId mul(NodeId a, NodeId b);
    NodeId matmul(NodeId a, NodeId b);
    NodeId embed(NodeId table, std::vector<int> ids);
    NodeId log_softmax(NodeId a);
    NodeId gather_logprob(NodeId lsm, int start_row, std::vector<int> ids);
    NodeId sum(NodeId a);
    NodeId mean(NodeId a);
    NodeId tanh_(NodeId a);
    NodeId softplus(NodeId a);
    NodeId concat_rows(NodeId a, NodeId b);
    NodeId rmsnorm(NodeId x, NodeId gain);
    NodeId causal_attention(NodeId q, NodeId k, NodeId v, int n_heads);

    // Evaluates every node in tape order. Placeholder and parameter leaves
    // take their values from `binds`; all leaves must be bound. Returns the
    // value of the last node. Throws GraphError on shape mismatches or any
    // non-finite intermediate.
    const Tensor& forward(const Bindings& binds);

    // Reverse pass from a scalar root. Gradients accumulate additively
    // across fan-out. Requires a prior forward().
    void backward(NodeId root);

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    const Tensor& grad(NodeId id) const;

    // Gradient of the named parameter after backward(); zero tensor if the
    // parameter does not influence the root.
    Tensor grad_of(const std::string& param_name) const;

    const std::vector<std::string>& parameter_names() const { return param_names_; }
    std::size_t node_count() const { return nodes_.size(); }
    const Node& node(NodeId id) const { return nodes_[id]; }

    static constexpr double kRmsEps = 1e-5;

private:
    NodeId push(Node n);
    void compute(Node& n);
    void backprop(Node& n);
    Tensor& grad_buf(NodeId id);
    void check_finite(const Node& n, NodeId id) const;

    std::vector<Node> nodes_;
    std::vector<std::string> param_names_;
    std::map<std::string, NodeId> leaf_by_name_;
    bool forwarded_ = false;
};

}  // namespace selfcorr::ad
