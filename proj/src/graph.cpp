#include "selfcorr/graph.hpp"

#include <algorithm>
#include <cmath>

namespace selfcorr::ad {

const char* op_name(Op op) {
    switch (op) {
        case Op::Placeholder: return "placeholder";
        case Op::Parameter: return "parameter";
        case Op::Constant: return "constant";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Scale: return "scale";
        case Op::Mul: return "mul";
        case Op::MatMul: return "matmul";
        case Op::Embed: return "embed";
        case Op::LogSoftmax: return "log_softmax";
        case Op::GatherLogProb: return "gather_logprob";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::Tanh: return "tanh";
        case Op::Softplus: return "softplus";
        case Op::ConcatRows: return "concat_rows";
        case Op::RmsNorm: return "rmsnorm";
        case Op::CausalAttention: return "causal_attention";
    }
    return "?";
}

namespace {

[[noreturn]] void shape_error(const Graph::Node& n, NodeId id, const std::string& detail) {
    throw GraphError("node #" + std::to_string(id) + " op=" + op_name(n.op) + ": " + detail);
}

// C = A * B via explicit transpose of B and row dot products; fixed
// accumulation order shared with the incremental decoder.
void matmul_into(const Tensor& a, const Tensor& b, Tensor& c) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> bt(n * k);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + i] = b.data[i * n + j];
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.data.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            c.data[i * n + j] = dot(arow, bt.data() + j * k, k);
        }
    }
}

}  // namespace

NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    forwarded_ = false;
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::placeholder(const std::string& name, std::vector<std::size_t> shape) {
    if (leaf_by_name_.count(name)) throw GraphError("duplicate leaf name: " + name);
    Node n;
    n.op = Op::Placeholder;
    n.name = name;
    n.value = Tensor(std::move(shape));
    NodeId id = push(std::move(n));
    leaf_by_name_[name] = id;
    return id;
}

NodeId Graph::parameter(const std::string& name, std::vector<std::size_t> shape) {
    if (leaf_by_name_.count(name)) throw GraphError("duplicate leaf name: " + name);
    Node n;
    n.op = Op::Parameter;
    n.name = name;
    n.value = Tensor(std::move(shape));
    NodeId id = push(std::move(n));
    leaf_by_name_[name] = id;
    param_names_.push_back(name);
    return id;
}

NodeId Graph::constant(Tensor value) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(value);
    return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Add;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Sub;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double c) {
    Node n;
    n.op = Op::Scale;
    n.a = a;
    n.scale = c;
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Mul;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    Node n;
    n.op = Op::MatMul;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

NodeId Graph::embed(NodeId table, std::vector<int> ids) {
    Node n;
    n.op = Op::Embed;
    n.a = table;
    n.indices = std::move(ids);
    return push(std::move(n));
}

NodeId Graph::log_softmax(NodeId a) {
    Node n;
    n.op = Op::LogSoftmax;
    n.a = a;
    return push(std::move(n));
}

NodeId Graph::gather_logprob(NodeId lsm, int start_row, std::vector<int> ids) {
    Node n;
    n.op = Op::GatherLogProb;
    n.a = lsm;
    n.start_row = start_row;
    n.indices = std::move(ids);
    return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
    Node n;
    n.op = Op::Sum;
    n.a = a;
    return push(std::move(n));
}

NodeId Graph::mean(NodeId a) {
    Node n;
    n.op = Op::Mean;
    n.a = a;
    return push(std::move(n));
}

NodeId Graph::tanh_(NodeId a) {
    Node n;
    n.op = Op::Tanh;
    n.a = a;
    return push(std::move(n));
}

NodeId Graph::softplus(NodeId a) {
    Node n;
    n.op = Op::Softplus;
    n.a = a;
    return push(std::move(n));
}

NodeId Graph::concat_rows(NodeId a, NodeId b) {
    Node n;
    n.op = Op::ConcatRows;
    n.a = a;
    n.b = b;
    return push(std::move(n));
}

NodeId Graph::rmsnorm(NodeId x, NodeId gain) {
    Node n;
    n.op = Op::RmsNorm;
    n.a = x;
    n.b = gain;
    return push(std::move(n));
}

NodeId Graph::causal_attention(NodeId q, NodeId k, NodeId v, int n_heads) {
    Node n;
    n.op = Op::CausalAttention;
    n.a = q;
    n.b = k;
    n.indices = {v};  // third input kept in indices to avoid widening Node
    n.n_heads = n_heads;
    return push(std::move(n));
}

void Graph::check_finite(const Node& n, NodeId id) const {
    for (double v : n.value.data) {
        if (!std::isfinite(v)) {
            throw GraphError("non-finite value in node #" + std::to_string(id) +
                             " op=" + std::string(op_name(n.op)));
        }
    }
}

const Tensor& Graph::forward(const Bindings& binds) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (n.op == Op::Placeholder || n.op == Op::Parameter) {
            auto it = binds.find(n.name);
            if (it == binds.end()) throw GraphError("unbound leaf: " + n.name);
            if (it->second->shape != n.value.shape) {
                shape_error(n, static_cast<NodeId>(i),
                            "bound shape " + shape_str(it->second->shape) +
                                " != declared " + shape_str(n.value.shape));
            }
            n.value = *it->second;
        } else if (n.op != Op::Constant) {
            compute(n);
        }
        check_finite(n, static_cast<NodeId>(i));
        n.has_grad = false;
    }
    forwarded_ = true;
    return nodes_.back().value;
}

void Graph::compute(Node& n) {
    const NodeId self = static_cast<NodeId>(&n - nodes_.data());
    auto& A = nodes_[n.a].value;
    switch (n.op) {
        case Op::Add:
        case Op::Sub:
        case Op::Mul: {
            auto& B = nodes_[n.b].value;
            if (!A.same_shape(B))
                shape_error(n, self, shape_str(A.shape) + " vs " + shape_str(B.shape));
            n.value = Tensor(A.shape);
            for (std::size_t i = 0; i < A.size(); ++i) {
                n.value.data[i] = n.op == Op::Add   ? A.data[i] + B.data[i]
                                  : n.op == Op::Sub ? A.data[i] - B.data[i]
                                                    : A.data[i] * B.data[i];
            }
            break;
        }
        case Op::Scale: {
            n.value = Tensor(A.shape);
            for (std::size_t i = 0; i < A.size(); ++i) n.value.data[i] = A.data[i] * n.scale;
            break;
        }
        case Op::MatMul: {
            auto& B = nodes_[n.b].value;
            if (A.cols() != B.rows())
                shape_error(n, self,
                            "inner dims differ: " + shape_str(A.shape) + " x " + shape_str(B.shape));
            n.value = Tensor({A.rows(), B.cols()});
            matmul_into(A, B, n.value);
            break;
        }
        case Op::Embed: {
            const std::size_t d = A.cols();
            n.value = Tensor({n.indices.size(), d});
            for (std::size_t r = 0; r < n.indices.size(); ++r) {
                const int id = n.indices[r];
                if (id < 0 || static_cast<std::size_t>(id) >= A.rows())
                    shape_error(n, self, "gather index " + std::to_string(id) + " out of range");
                std::copy_n(A.data.data() + static_cast<std::size_t>(id) * d, d,
                            n.value.data.data() + r * d);
            }
            break;
        }
        case Op::LogSoftmax: {
            const std::size_t R = A.rows(), C = A.cols();
            n.value = Tensor(A.shape);
            for (std::size_t r = 0; r < R; ++r) {
                const double* x = A.data.data() + r * C;
                double* y = n.value.data.data() + r * C;
                double mx = x[0];
                for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[c]);
                double z = 0.0;
                for (std::size_t c = 0; c < C; ++c) z += std::exp(x[c] - mx);
                const double lz = std::log(z) + mx;
                for (std::size_t c = 0; c < C; ++c) y[c] = x[c] - lz;
            }
            break;
        }
        case Op::GatherLogProb: {
            const std::size_t C = A.cols();
            n.value = Tensor({n.indices.size()});
            for (std::size_t k = 0; k < n.indices.size(); ++k) {
                const std::size_t r = static_cast<std::size_t>(n.start_row) + k;
                const int id = n.indices[k];
                if (r >= A.rows() || id < 0 || static_cast<std::size_t>(id) >= C)
                    shape_error(n, self, "gather (" + std::to_string(r) + "," +
                                             std::to_string(id) + ") out of range");
                n.value.data[k] = A.data[r * C + static_cast<std::size_t>(id)];
            }
            break;
        }
        case Op::Sum:
        case Op::Mean: {
            double s = 0.0;
            for (double v : A.data) s += v;
            if (n.op == Op::Mean) s /= static_cast<double>(A.size());
            n.value = Tensor::scalar(s);
            break;
        }
        case Op::Tanh: {
            n.value = Tensor(A.shape);
            for (std::size_t i = 0; i < A.size(); ++i) n.value.data[i] = std::tanh(A.data[i]);
            break;
        }
        case Op::Softplus: {
            n.value = Tensor(A.shape);
            for (std::size_t i = 0; i < A.size(); ++i) {
                const double x = A.data[i];
                n.value.data[i] = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
            }
            break;
        }
        case Op::ConcatRows: {
            auto& B = nodes_[n.b].value;
            if (A.cols() != B.cols())
                shape_error(n, self, shape_str(A.shape) + " vs " + shape_str(B.shape));
            n.value = Tensor({A.rows() + B.rows(), A.cols()});
            std::copy(A.data.begin(), A.data.end(), n.value.data.begin());
            std::copy(B.data.begin(), B.data.end(), n.value.data.begin() + A.size());
            break;
        }
        case Op::RmsNorm: {
            auto& G = nodes_[n.b].value;
            const std::size_t R = A.rows(), C = A.cols();
            if (G.size() != C)
                shape_error(n, self, "gain " + shape_str(G.shape) + " vs x " + shape_str(A.shape));
            n.value = Tensor(A.shape);
            n.scratch.assign(R, 0.0);  // 1/rms per row
            for (std::size_t r = 0; r < R; ++r) {
                const double* x = A.data.data() + r * C;
                double ms = 0.0;
                for (std::size_t c = 0; c < C; ++c) ms += x[c] * x[c];
                ms /= static_cast<double>(C);
                const double inv = 1.0 / std::sqrt(ms + kRmsEps);
                n.scratch[r] = inv;
                double* y = n.value.data.data() + r * C;
                for (std::size_t c = 0; c < C; ++c) y[c] = x[c] * inv * G.data[c];
            }
            break;
        }
        case Op::CausalAttention: {
            auto& K = nodes_[n.b].value;
            auto& V = nodes_[n.indices[0]].value;
            const std::size_t T = A.rows(), d = A.cols();
            if (!A.same_shape(K) || !A.same_shape(V))
                shape_error(n, self, "q/k/v shapes differ");
            const int H = n.n_heads;
            if (d % static_cast<std::size_t>(H) != 0)
                shape_error(n, self, "model dim not divisible by heads");
            const std::size_t dh = d / static_cast<std::size_t>(H);
            const double s = 1.0 / std::sqrt(static_cast<double>(dh));
            n.value = Tensor({T, d});
            n.scratch.assign(static_cast<std::size_t>(H) * T * T, 0.0);
            for (int h = 0; h < H; ++h) {
                const std::size_t off = static_cast<std::size_t>(h) * dh;
                double* attn = n.scratch.data() + static_cast<std::size_t>(h) * T * T;
                for (std::size_t i = 0; i < T; ++i) {
                    double* arow = attn + i * T;
                    double mx = -1e300;
                    for (std::size_t j = 0; j <= i; ++j) {
                        arow[j] = s * dot(A.data.data() + i * d + off,
                                          K.data.data() + j * d + off, dh);
                        mx = std::max(mx, arow[j]);
                    }
                    double z = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        arow[j] = std::exp(arow[j] - mx);
                        z += arow[j];
                    }
                    for (std::size_t j = 0; j <= i; ++j) arow[j] /= z;
                    double* out = n.value.data.data() + i * d + off;
                    for (std::size_t c = 0; c < dh; ++c) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j <= i; ++j)
                            acc += arow[j] * V.data[j * d + off + c];
                        out[c] = acc;
                    }
                }
            }
            break;
        }
        default:
            break;
    }
}

Tensor& Graph::grad_buf(NodeId id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
        n.grad = Tensor(n.value.shape);
        n.has_grad = true;
    }
    return n.grad;
}

const Tensor& Graph::grad(NodeId id) const {
    if (!nodes_[id].has_grad) throw GraphError("gradient not computed for node");
    return nodes_[id].grad;
}

void Graph::backward(NodeId root) {
    if (!forwarded_) throw GraphError("backward before forward");
    if (!nodes_[root].value.is_scalar())
        throw GraphError("backward root must be scalar, got shape " +
                         shape_str(nodes_[root].value.shape));
    for (auto& n : nodes_) n.has_grad = false;
    grad_buf(root).data[0] = 1.0;
    for (NodeId id = root; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.has_grad) continue;
        backprop(n);
    }
}

void Graph::backprop(Node& n) {
    const Tensor& dY = n.grad;
    switch (n.op) {
        case Op::Placeholder:
        case Op::Parameter:
        case Op::Constant:
            break;
        case Op::Add: {
            Tensor& da = grad_buf(n.a);
            Tensor& db = grad_buf(n.b);
            for (std::size_t i = 0; i < dY.size(); ++i) {
                da.data[i] += dY.data[i];
                db.data[i] += dY.data[i];
            }
            break;
        }
        case Op::Sub: {
            Tensor& da = grad_buf(n.a);
            Tensor& db = grad_buf(n.b);
            for (std::size_t i = 0; i < dY.size(); ++i) {
                da.data[i] += dY.data[i];
                db.data[i] -= dY.data[i];
            }
            break;
        }
        case Op::Scale: {
            Tensor& da = grad_buf(n.a);
            for (std::size_t i = 0; i < dY.size(); ++i) da.data[i] += n.scale * dY.data[i];
            break;
        }
        case Op::Mul: {
            const Tensor& A = nodes_[n.a].value;
            const Tensor& B = nodes_[n.b].value;
            Tensor& da = grad_buf(n.a);
            Tensor& db = grad_buf(n.b);
            for (std::size_t i = 0; i < dY.size(); ++i) {
                da.data[i] += dY.data[i] * B.data[i];
                db.data[i] += dY.data[i] * A.data[i];
            }
            break;
        }
        case Op::MatMul: {
            const Tensor& A = nodes_[n.a].value;
            const Tensor& B = nodes_[n.b].value;
            Tensor& da = grad_buf(n.a);
            Tensor& db = grad_buf(n.b);
            const std::size_t m = A.rows(), k = A.cols(), c = B.cols();
            // dA += dY * B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < k; ++j)
                    da.data[i * k + j] += dot(dY.data.data() + i * c, B.data.data() + j * c, c);
            // dB += A^T * dY
            for (std::size_t i = 0; i < m; ++i) {
                const double* arow = A.data.data() + i * k;
                const double* gy = dY.data.data() + i * c;
                for (std::size_t j = 0; j < k; ++j) {
                    const double av = arow[j];
                    if (av == 0.0) continue;
                    double* brow = db.data.data() + j * c;
                    for (std::size_t t = 0; t < c; ++t) brow[t] += av * gy[t];
                }
            }
            break;
        }
        case Op::Embed: {
            Tensor& dt = grad_buf(n.a);
            const std::size_t d = dt.cols();
            for (std::size_t r = 0; r < n.indices.size(); ++r) {
                double* dst = dt.data.data() + static_cast<std::size_t>(n.indices[r]) * d;
                const double* src = dY.data.data() + r * d;
                for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
            }
            break;
        }
        case Op::LogSoftmax: {
            const Tensor& Y = n.value;
            Tensor& da = grad_buf(n.a);
            const std::size_t R = Y.rows(), C = Y.cols();
            for (std::size_t r = 0; r < R; ++r) {
                const double* y = Y.data.data() + r * C;
                const double* gy = dY.data.data() + r * C;
                double gsum = 0.0;
                for (std::size_t c = 0; c < C; ++c) gsum += gy[c];
                double* gx = da.data.data() + r * C;
                for (std::size_t c = 0; c < C; ++c) gx[c] += gy[c] - std::exp(y[c]) * gsum;
            }
            break;
        }
        case Op::GatherLogProb: {
            Tensor& da = grad_buf(n.a);
            const std::size_t C = da.cols();
            for (std::size_t k = 0; k < n.indices.size(); ++k) {
                const std::size_t r = static_cast<std::size_t>(n.start_row) + k;
                da.data[r * C + static_cast<std::size_t>(n.indices[k])] += dY.data[k];
            }
            break;
        }
        case Op::Sum: {
            Tensor& da = grad_buf(n.a);
            for (double& g : da.data) g += dY.data[0];
            break;
        }
        case Op::Mean: {
            Tensor& da = grad_buf(n.a);
            const double g = dY.data[0] / static_cast<double>(da.size());
            for (double& gv : da.data) gv += g;
            break;
        }
        case Op::Tanh: {
            const Tensor& Y = n.value;
            Tensor& da = grad_buf(n.a);
            for (std::size_t i = 0; i < Y.size(); ++i)
                da.data[i] += dY.data[i] * (1.0 - Y.data[i] * Y.data[i]);
            break;
        }
        case Op::Softplus: {
            const Tensor& X = nodes_[n.a].value;
            Tensor& da = grad_buf(n.a);
            for (std::size_t i = 0; i < X.size(); ++i) {
                const double x = X.data[i];
                const double sig = x > 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                           : std::exp(x) / (1.0 + std::exp(x));
                da.data[i] += dY.data[i] * sig;
            }
            break;
        }
        case Op::ConcatRows: {
            Tensor& da = grad_buf(n.a);
            Tensor& db = grad_buf(n.b);
            for (std::size_t i = 0; i < da.size(); ++i) da.data[i] += dY.data[i];
            for (std::size_t i = 0; i < db.size(); ++i) db.data[i] += dY.data[da.size() + i];
            break;
        }
        case Op::RmsNorm: {
            const Tensor& X = nodes_[n.a].value;
            const Tensor& G = nodes_[n.b].value;
            Tensor& dx = grad_buf(n.a);
            Tensor& dg = grad_buf(n.b);
            const std::size_t R = X.rows(), C = X.cols();
            for (std::size_t r = 0; r < R; ++r) {
                const double inv = n.scratch[r];
                const double* x = X.data.data() + r * C;
                const double* gy = dY.data.data() + r * C;
                double proj = 0.0;  // sum_k gy_k * g_k * x_k
                for (std::size_t c = 0; c < C; ++c) proj += gy[c] * G.data[c] * x[c];
                const double coef = inv * inv * inv * proj / static_cast<double>(C);
                double* gx = dx.data.data() + r * C;
                for (std::size_t c = 0; c < C; ++c) {
                    gx[c] += inv * G.data[c] * gy[c] - coef * x[c];
                    dg.data[c] += gy[c] * x[c] * inv;
                }
            }
            break;
        }
        case Op::CausalAttention: {
            const Tensor& Q = nodes_[n.a].value;
            const Tensor& K = nodes_[n.b].value;
            const Tensor& V = nodes_[n.indices[0]].value;
            Tensor& dq = grad_buf(n.a);
            Tensor& dk = grad_buf(n.b);
            Tensor& dv = grad_buf(n.indices[0]);
            const std::size_t T = Q.rows(), d = Q.cols();
            const int H = n.n_heads;
            const std::size_t dh = d / static_cast<std::size_t>(H);
            const double s = 1.0 / std::sqrt(static_cast<double>(dh));
            std::vector<double> dattn(T);
            for (int h = 0; h < H; ++h) {
                const std::size_t off = static_cast<std::size_t>(h) * dh;
                const double* attn = n.scratch.data() + static_cast<std::size_t>(h) * T * T;
                for (std::size_t i = 0; i < T; ++i) {
                    const double* arow = attn + i * T;
                    const double* go = dY.data.data() + i * d + off;
                    // dV and dA
                    double dsum = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double da = dot(go, V.data.data() + j * d + off, dh);
                        dattn[j] = da;
                        dsum += da * arow[j];
                        double* dvrow = dv.data.data() + j * d + off;
                        for (std::size_t c = 0; c < dh; ++c) dvrow[c] += arow[j] * go[c];
                    }
                    // softmax backward, then scores -> q, k
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double ds = arow[j] * (dattn[j] - dsum) * s;
                        if (ds == 0.0) continue;
                        double* dqrow = dq.data.data() + i * d + off;
                        double* dkrow = dk.data.data() + j * d + off;
                        const double* krow = K.data.data() + j * d + off;
                        const double* qrow = Q.data.data() + i * d + off;
                        for (std::size_t c = 0; c < dh; ++c) {
                            dqrow[c] += ds * krow[c];
                            dkrow[c] += ds * qrow[c];
                        }
                    }
                }
            }
            break;
        }
        default:
            break;
    }
}

Tensor Graph::grad_of(const std::string& param_name) const {
    auto it = leaf_by_name_.find(param_name);
    if (it == leaf_by_name_.end()) throw GraphError("unknown parameter: " + param_name);
    const Node& n = nodes_[it->second];
    if (n.has_grad) return n.grad;
    return Tensor(n.value.shape);
}

}  // namespace selfcorr::ad
