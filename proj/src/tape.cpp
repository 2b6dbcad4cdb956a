#include "derfkit/tape.hpp"

#include "derfkit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace derfkit {

namespace {

// c[m,n] += a[m,k] @ b[k,n]
void mm_nn(const double* a, const double* b, double* c,
           std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m,n] += a[m,k] @ b[n,k]^T
void mm_nt(const double* a, const double* b, double* c,
           std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// c[k,n] += a[m,k]^T @ b[m,n]
void mm_tn(const double* a, const double* b, double* c,
           std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

std::size_t trailing_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

} // namespace

const Tape::Node& Tape::node_at(Var v, const char* ctx) const {
    if (!v.valid() || v.idx >= nodes_.size()) {
        throw Error(Error::Category::invalid_argument,
                    std::string(ctx) + ": variable does not refer to a tape node");
    }
    return nodes_[v.idx];
}

bool Tape::any_requires(const std::vector<Var>& vs) const {
    for (Var v : vs) {
        if (v.valid() && nodes_[v.idx].requires_grad) return true;
    }
    return false;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.op = "leaf";
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

Var Tape::record(std::string op, Tensor value, std::vector<Var> parents,
                 std::function<void(Tape&, std::size_t)> back) {
    Node n;
    n.value = std::move(value);
    n.op = std::move(op);
    n.requires_grad = any_requires(parents);
    if (n.requires_grad) {
        n.parents.reserve(parents.size());
        for (Var p : parents) {
            if (p.valid()) n.parents.push_back(p.idx);
        }
        n.back = std::move(back);
    }
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const { return node_at(v, "value").value; }

bool Tape::requires_grad(Var v) const { return node_at(v, "requires_grad").requires_grad; }

const Tensor& Tape::grad(Var v) const {
    const Node& n = node_at(v, "grad");
    if (!n.requires_grad) {
        throw ContractError("grad: node '" + n.op + "' does not require gradients");
    }
    if (!backward_done_) throw ContractError("grad: backward() has not been run on this tape");
    if (!n.adjoint_live) {
        // Disconnected from the loss: gradient is identically zero.
        auto& mut = const_cast<Node&>(n);
        mut.adjoint = Tensor(n.value.shape(), 0.0);
        mut.adjoint_live = true;
    }
    return n.adjoint;
}

Tensor& Tape::grad_buffer(std::size_t idx) {
    Node& n = nodes_[idx];
    if (!n.adjoint_live) {
        n.adjoint = Tensor(n.value.shape(), 0.0);
        n.adjoint_live = true;
    }
    return n.adjoint;
}

void Tape::add_into(std::size_t idx, const Tensor& contribution) {
    Tensor& buf = grad_buffer(idx);
    if (!buf.same_shape(contribution)) {
        throw ShapeError("adjoint contribution shape " + shape_to_string(contribution.shape()) +
                         " does not match node shape " + shape_to_string(buf.shape()));
    }
    double* d = buf.data();
    const double* s = contribution.data();
    for (std::size_t i = 0; i < contribution.numel(); ++i) d[i] += s[i];
}

void Tape::backward(Var loss) {
    const Node& ln = node_at(loss, "backward");
    if (ln.value.numel() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " +
                            shape_to_string(ln.value.shape()));
    }
    if (!ln.requires_grad) {
        throw ContractError("backward: loss does not depend on any gradient-requiring leaf");
    }
    for (Node& n : nodes_) n.adjoint_live = false;
    backward_done_ = true;
    grad_buffer(loss.idx)[0] = 1.0;
    for (std::size_t i = loss.idx + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.adjoint_live && n.back) n.back(*this, i);
    }
}

// --- arithmetic -----------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_to_string(av.shape()) +
                         " @ " + shape_to_string(bv.shape()));
    }
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out({m, n}, 0.0);
    mm_nn(av.data(), bv.data(), out.data(), m, k, n);
    const std::size_t ai = a.idx, bi = b.idx;
    return record("matmul", std::move(out), {a, b}, [ai, bi, m, k, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        if (t.nodes_[ai].requires_grad)
            mm_nt(g.data(), t.nodes_[bi].value.data(), t.grad_buffer(ai).data(), m, n, k);
        if (t.nodes_[bi].requires_grad)
            mm_tn(t.nodes_[ai].value.data(), g.data(), t.grad_buffer(bi).data(), m, k, n);
    });
}

Var Tape::matmul_nt(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(1)) {
        throw ShapeError("matmul_nt: incompatible shapes " + shape_to_string(av.shape()) +
                         " @ " + shape_to_string(bv.shape()) + "^T");
    }
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
    Tensor out({m, n}, 0.0);
    mm_nt(av.data(), bv.data(), out.data(), m, k, n);
    const std::size_t ai = a.idx, bi = b.idx;
    return record("matmul_nt", std::move(out), {a, b}, [ai, bi, m, k, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        if (t.nodes_[ai].requires_grad)
            mm_nn(g.data(), t.nodes_[bi].value.data(), t.grad_buffer(ai).data(), m, n, k);
        if (t.nodes_[bi].requires_grad)
            mm_tn(g.data(), t.nodes_[ai].value.data(), t.grad_buffer(bi).data(), m, n, k);
    });
}

Var Tape::bmm(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1)) {
        throw ShapeError("bmm: incompatible shapes " + shape_to_string(av.shape()) +
                         " @ " + shape_to_string(bv.shape()));
    }
    const std::size_t nb = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
    Tensor out({nb, m, n}, 0.0);
    for (std::size_t s = 0; s < nb; ++s)
        mm_nn(av.data() + s * m * k, bv.data() + s * k * n, out.data() + s * m * n, m, k, n);
    const std::size_t ai = a.idx, bi = b.idx;
    return record("bmm", std::move(out), {a, b}, [ai, bi, nb, m, k, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        if (t.nodes_[ai].requires_grad) {
            Tensor& da = t.grad_buffer(ai);
            for (std::size_t s = 0; s < nb; ++s)
                mm_nt(g.data() + s * m * n, t.nodes_[bi].value.data() + s * k * n,
                      da.data() + s * m * k, m, n, k);
        }
        if (t.nodes_[bi].requires_grad) {
            Tensor& db = t.grad_buffer(bi);
            for (std::size_t s = 0; s < nb; ++s)
                mm_tn(t.nodes_[ai].value.data() + s * m * k, g.data() + s * m * n,
                      db.data() + s * k * n, m, k, n);
        }
    });
}

Var Tape::bmm_nt(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2)) {
        throw ShapeError("bmm_nt: incompatible shapes " + shape_to_string(av.shape()) +
                         " @ " + shape_to_string(bv.shape()) + "^T");
    }
    const std::size_t nb = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(1);
    Tensor out({nb, m, n}, 0.0);
    for (std::size_t s = 0; s < nb; ++s)
        mm_nt(av.data() + s * m * k, bv.data() + s * n * k, out.data() + s * m * n, m, k, n);
    const std::size_t ai = a.idx, bi = b.idx;
    return record("bmm_nt", std::move(out), {a, b}, [ai, bi, nb, m, k, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        if (t.nodes_[ai].requires_grad) {
            Tensor& da = t.grad_buffer(ai);
            for (std::size_t s = 0; s < nb; ++s)
                mm_nn(g.data() + s * m * n, t.nodes_[bi].value.data() + s * n * k,
                      da.data() + s * m * k, m, n, k);
        }
        if (t.nodes_[bi].requires_grad) {
            Tensor& db = t.grad_buffer(bi);
            for (std::size_t s = 0; s < nb; ++s)
                mm_tn(g.data() + s * m * n, t.nodes_[ai].value.data() + s * m * k,
                      db.data() + s * n * k, m, n, k);
        }
    });
}

Var Tape::add(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (!av.same_shape(bv)) {
        throw ShapeError("add: shape mismatch " + shape_to_string(av.shape()) + " vs " +
                         shape_to_string(bv.shape()));
    }
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
    const std::size_t ai = a.idx, bi = b.idx;
    return record("add", std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        if (t.nodes_[ai].requires_grad) t.add_into(ai, g);
        if (t.nodes_[bi].requires_grad) t.add_into(bi, g);
    });
}

Var Tape::sub(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (!av.same_shape(bv)) {
        throw ShapeError("sub: shape mismatch " + shape_to_string(av.shape()) + " vs " +
                         shape_to_string(bv.shape()));
    }
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] - bv[i];
    const std::size_t ai = a.idx, bi = b.idx;
    return record("sub", std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        if (t.nodes_[ai].requires_grad) t.add_into(ai, g);
        if (t.nodes_[bi].requires_grad) {
            Tensor& db = t.grad_buffer(bi);
            for (std::size_t i = 0; i < g.numel(); ++i) db[i] -= g[i];
        }
    });
}

Var Tape::mul(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (!av.same_shape(bv)) {
        throw ShapeError("mul: shape mismatch " + shape_to_string(av.shape()) + " vs " +
                         shape_to_string(bv.shape()));
    }
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
    const std::size_t ai = a.idx, bi = b.idx;
    return record("mul", std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        if (t.nodes_[ai].requires_grad) {
            Tensor& da = t.grad_buffer(ai);
            const Tensor& bval = t.nodes_[bi].value;
            for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i] * bval[i];
        }
        if (t.nodes_[bi].requires_grad) {
            Tensor& db = t.grad_buffer(bi);
            const Tensor& aval = t.nodes_[ai].value;
            for (std::size_t i = 0; i < g.numel(); ++i) db[i] += g[i] * aval[i];
        }
    });
}

Var Tape::add_rowvec(Var x, Var v) {
    const Tensor& xv = value(x);
    const Tensor& vv = value(v);
    const std::size_t c = trailing_dim(xv.shape());
    if (vv.ndim() != 1 || vv.numel() != c) {
        throw ShapeError("add_rowvec: vector shape " + shape_to_string(vv.shape()) +
                         " does not match trailing axis of " + shape_to_string(xv.shape()));
    }
    Tensor out(xv.shape());
    const std::size_t rows = xv.numel() / c;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xv[r * c + j] + vv[j];
    const std::size_t xi = x.idx, vi = v.idx;
    return record("add_rowvec", std::move(out), {x, v}, [xi, vi, rows, c](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        if (t.nodes_[xi].requires_grad) t.add_into(xi, g);
        if (t.nodes_[vi].requires_grad) {
            Tensor& dv = t.grad_buffer(vi);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) dv[j] += g[r * c + j];
        }
    });
}

Var Tape::mul_rowvec(Var x, Var v) {
    const Tensor& xv = value(x);
    const Tensor& vv = value(v);
    const std::size_t c = trailing_dim(xv.shape());
    if (vv.ndim() != 1 || vv.numel() != c) {
        throw ShapeError("mul_rowvec: vector shape " + shape_to_string(vv.shape()) +
                         " does not match trailing axis of " + shape_to_string(xv.shape()));
    }
    Tensor out(xv.shape());
    const std::size_t rows = xv.numel() / c;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xv[r * c + j] * vv[j];
    const std::size_t xi = x.idx, vi = v.idx;
    return record("mul_rowvec", std::move(out), {x, v}, [xi, vi, rows, c](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        if (t.nodes_[xi].requires_grad) {
            Tensor& dx = t.grad_buffer(xi);
            const Tensor& vval = t.nodes_[vi].value;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) dx[r * c + j] += g[r * c + j] * vval[j];
        }
        if (t.nodes_[vi].requires_grad) {
            Tensor& dv = t.grad_buffer(vi);
            const Tensor& xval = t.nodes_[xi].value;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) dv[j] += g[r * c + j] * xval[r * c + j];
        }
    });
}

Var Tape::scale(Var x, double cfac) {
    const Tensor& xv = value(x);
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] * cfac;
    const std::size_t xi = x.idx;
    return record("scale", std::move(out), {x}, [xi, cfac](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        Tensor& dx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * cfac;
    });
}

Var Tape::reshape(Var x, Shape new_shape) {
    const Tensor& xv = value(x);
    Tensor out = xv.reshaped(std::move(new_shape));
    const std::size_t xi = x.idx;
    return record("reshape", std::move(out), {x}, [xi](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        Tensor& dx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
    });
}

Var Tape::transpose2d(Var x) {
    const Tensor& xv = value(x);
    if (xv.ndim() != 2) {
        throw ShapeError("transpose2d: expected 2-d tensor, got " + shape_to_string(xv.shape()));
    }
    const std::size_t m = xv.dim(0), n = xv.dim(1);
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
    const std::size_t xi = x.idx;
    return record("transpose2d", std::move(out), {x}, [xi, m, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        Tensor& dx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += g[j * m + i];
    });
}

Var Tape::softmax_lastdim(Var x) {
    const Tensor& xv = value(x);
    const std::size_t c = trailing_dim(xv.shape());
    const std::size_t rows = xv.numel() / c;
    Tensor out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * c;
        double* o = out.data() + r * c;
        double mx = in[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            o[j] = std::exp(in[j] - mx);
            denom += o[j];
        }
        for (std::size_t j = 0; j < c; ++j) o[j] /= denom;
    }
    const std::size_t xi = x.idx;
    return record("softmax", std::move(out), {x}, [xi, rows, c](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        const Tensor& y = t.nodes_[self].value;
        Tensor& dx = t.grad_buffer(xi);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g.data() + r * c;
            const double* yr = y.data() + r * c;
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
            double* dr = dx.data() + r * c;
            for (std::size_t j = 0; j < c; ++j) dr[j] += yr[j] * (gr[j] - dot);
        }
    });
}

Var Tape::unary(Var x, const ScalarFn& f, const ScalarFn& df, std::string name) {
    const Tensor& xv = value(x);
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(xv[i]);
    const std::size_t xi = x.idx;
    ScalarFn dcopy = df;
    return record(std::move(name), std::move(out), {x},
                  [xi, dcopy](Tape& t, std::size_t self) {
                      const Tensor& g = t.grad_buffer(self);
                      const Tensor& xval = t.nodes_[xi].value;
                      Tensor& dx = t.grad_buffer(xi);
                      for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * dcopy(xval[i]);
                  });
}

Var Tape::sum(Var x) {
    const Tensor& xv = value(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i];
    const std::size_t xi = x.idx;
    return record("sum", Tensor::scalar(acc), {x}, [xi](Tape& t, std::size_t self) {
        const double g = t.grad_buffer(self)[0];
        Tensor& dx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += g;
    });
}

Var Tape::mean_all(Var x) {
    const Tensor& xv = value(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i];
    const double inv = 1.0 / static_cast<double>(xv.numel());
    const std::size_t xi = x.idx;
    return record("mean_all", Tensor::scalar(acc * inv), {x}, [xi, inv](Tape& t, std::size_t self) {
        const double g = t.grad_buffer(self)[0] * inv;
        Tensor& dx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += g;
    });
}

Var Tape::gather_rows(Var table, std::vector<std::size_t> indices) {
    const Tensor& tv = value(table);
    if (tv.ndim() != 2) {
        throw ShapeError("gather_rows: table must be 2-d, got " + shape_to_string(tv.shape()));
    }
    const std::size_t v = tv.dim(0), c = tv.dim(1);
    for (std::size_t idx : indices) {
        if (idx >= v) {
            throw Error(Error::Category::invalid_argument,
                        "gather_rows: index " + std::to_string(idx) + " out of range for table with " +
                            std::to_string(v) + " rows");
        }
    }
    Tensor out({indices.size(), c});
    for (std::size_t r = 0; r < indices.size(); ++r)
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] = tv[indices[r] * c + j];
    const std::size_t ti = table.idx;
    return record("gather_rows", std::move(out), {table},
                  [ti, c, idxs = std::move(indices)](Tape& t, std::size_t self) {
                      const Tensor& g = t.grad_buffer(self);
                      Tensor& dt = t.grad_buffer(ti);
                      for (std::size_t r = 0; r < idxs.size(); ++r)
                          for (std::size_t j = 0; j < c; ++j) dt[idxs[r] * c + j] += g[r * c + j];
                  });
}

Var Tape::mean_rows(Var x, std::size_t group) {
    const Tensor& xv = value(x);
    if (xv.ndim() != 2 || group == 0 || xv.dim(0) % group != 0) {
        throw ShapeError("mean_rows: cannot group " + shape_to_string(xv.shape()) +
                         " by " + std::to_string(group));
    }
    const std::size_t c = xv.dim(1), groups = xv.dim(0) / group;
    const double inv = 1.0 / static_cast<double>(group);
    Tensor out({groups, c}, 0.0);
    for (std::size_t gidx = 0; gidx < groups; ++gidx)
        for (std::size_t r = 0; r < group; ++r)
            for (std::size_t j = 0; j < c; ++j)
                out[gidx * c + j] += xv[(gidx * group + r) * c + j] * inv;
    const std::size_t xi = x.idx;
    return record("mean_rows", std::move(out), {x},
                  [xi, group, groups, c, inv](Tape& t, std::size_t self) {
                      const Tensor& g = t.grad_buffer(self);
                      Tensor& dx = t.grad_buffer(xi);
                      for (std::size_t gidx = 0; gidx < groups; ++gidx)
                          for (std::size_t r = 0; r < group; ++r)
                              for (std::size_t j = 0; j < c; ++j)
                                  dx[(gidx * group + r) * c + j] += g[gidx * c + j] * inv;
                  });
}

Var Tape::scale_rows(Var x, std::vector<double> factors) {
    const Tensor& xv = value(x);
    const std::size_t c = trailing_dim(xv.shape());
    const std::size_t rows = xv.numel() / c;
    if (factors.size() != rows) {
        throw ShapeError("scale_rows: " + std::to_string(factors.size()) + " factors for " +
                         std::to_string(rows) + " rows");
    }
    Tensor out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xv[r * c + j] * factors[r];
    const std::size_t xi = x.idx;
    return record("scale_rows", std::move(out), {x},
                  [xi, rows, c, fac = std::move(factors)](Tape& t, std::size_t self) {
                      const Tensor& g = t.grad_buffer(self);
                      Tensor& dx = t.grad_buffer(xi);
                      for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t j = 0; j < c; ++j) dx[r * c + j] += g[r * c + j] * fac[r];
                  });
}

namespace {

// Index map for [B*T, H*dh] <-> [B*H, T, dh]. Returns source index in the
// flat input for each flat output position of split_heads.
inline std::size_t split_src(std::size_t out_flat, std::size_t batch, std::size_t seq,
                             std::size_t heads, std::size_t dh) {
    const std::size_t d = out_flat % dh;
    std::size_t rest = out_flat / dh;
    const std::size_t tpos = rest % seq;
    rest /= seq;
    const std::size_t h = rest % heads;
    const std::size_t b = rest / heads;
    (void)batch;
    return (b * seq + tpos) * (heads * dh) + h * dh + d;
}

} // namespace

Var Tape::split_heads(Var x, std::size_t batch, std::size_t seq, std::size_t heads) {
    const Tensor& xv = value(x);
    if (xv.ndim() != 2 || xv.dim(0) != batch * seq || xv.dim(1) % heads != 0) {
        throw ShapeError("split_heads: shape " + shape_to_string(xv.shape()) +
                         " incompatible with batch=" + std::to_string(batch) + " seq=" +
                         std::to_string(seq) + " heads=" + std::to_string(heads));
    }
    const std::size_t dh = xv.dim(1) / heads;
    Tensor out({batch * heads, seq, dh});
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[split_src(i, batch, seq, heads, dh)];
    const std::size_t xi = x.idx;
    return record("split_heads", std::move(out), {x},
                  [xi, batch, seq, heads, dh](Tape& t, std::size_t self) {
                      const Tensor& g = t.grad_buffer(self);
                      Tensor& dx = t.grad_buffer(xi);
                      for (std::size_t i = 0; i < g.numel(); ++i)
                          dx[split_src(i, batch, seq, heads, dh)] += g[i];
                  });
}

Var Tape::merge_heads(Var x, std::size_t batch, std::size_t seq, std::size_t heads) {
    const Tensor& xv = value(x);
    if (xv.ndim() != 3 || xv.dim(0) != batch * heads || xv.dim(1) != seq) {
        throw ShapeError("merge_heads: shape " + shape_to_string(xv.shape()) +
                         " incompatible with batch=" + std::to_string(batch) + " seq=" +
                         std::to_string(seq) + " heads=" + std::to_string(heads));
    }
    const std::size_t dh = xv.dim(2);
    Tensor out({batch * seq, heads * dh});
    for (std::size_t i = 0; i < xv.numel(); ++i) out[split_src(i, batch, seq, heads, dh)] = xv[i];
    const std::size_t xi = x.idx;
    return record("merge_heads", std::move(out), {x},
                  [xi, batch, seq, heads, dh](Tape& t, std::size_t self) {
                      const Tensor& g = t.grad_buffer(self);
                      Tensor& dx = t.grad_buffer(xi);
                      for (std::size_t i = 0; i < dx.numel(); ++i)
                          dx[i] += g[split_src(i, batch, seq, heads, dh)];
                  });
}

// --- fused layer ops --------------------------------------------------------

Var Tape::layer_norm(Var x, Var gamma, Var beta, double epsilon) {
    const Tensor& xv = value(x);
    const Tensor& gv = value(gamma);
    const Tensor& bv = value(beta);
    const std::size_t c = trailing_dim(xv.shape());
    if (gv.ndim() != 1 || gv.numel() != c || bv.ndim() != 1 || bv.numel() != c) {
        throw ShapeError("layer_norm: gamma " + shape_to_string(gv.shape()) + " / beta " +
                         shape_to_string(bv.shape()) + " do not match channel count " +
                         std::to_string(c));
    }
    if (epsilon < 0.0) throw ParameterError("layer_norm: epsilon must be nonnegative");
    const std::size_t rows = xv.numel() / c;
    Tensor out(xv.shape());
    Tensor xhat(xv.shape());
    std::vector<double> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += in[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = in[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        inv[r] = 1.0 / std::sqrt(var + epsilon);
        double* xh = xhat.data() + r * c;
        double* o = out.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) {
            xh[j] = (in[j] - mu) * inv[r];
            o[j] = gv[j] * xh[j] + bv[j];
        }
    }
    const std::size_t xi = x.idx, gi = gamma.idx, bi = beta.idx;
    return record("layer_norm", std::move(out), {x, gamma, beta},
                  [xi, gi, bi, rows, c, xh = std::move(xhat), inv = std::move(inv)](
                      Tape& t, std::size_t self) {
                      const Tensor& g = t.grad_buffer(self);
                      const Tensor& gv = t.nodes_[gi].value;
                      const bool want_x = t.nodes_[xi].requires_grad;
                      const bool want_g = t.nodes_[gi].requires_grad;
                      const bool want_b = t.nodes_[bi].requires_grad;
                      for (std::size_t r = 0; r < rows; ++r) {
                          const double* gr = g.data() + r * c;
                          const double* xhr = xh.data() + r * c;
                          if (want_g || want_b) {
                              Tensor& dg = t.grad_buffer(gi);
                              Tensor& db = t.grad_buffer(bi);
                              for (std::size_t j = 0; j < c; ++j) {
                                  if (want_g) dg[j] += gr[j] * xhr[j];
                                  if (want_b) db[j] += gr[j];
                              }
                          }
                          if (want_x) {
                              double mean_gg = 0.0, mean_ggx = 0.0;
                              for (std::size_t j = 0; j < c; ++j) {
                                  const double gg = gv[j] * gr[j];
                                  mean_gg += gg;
                                  mean_ggx += gg * xhr[j];
                              }
                              mean_gg /= static_cast<double>(c);
                              mean_ggx /= static_cast<double>(c);
                              Tensor& dx = t.grad_buffer(xi);
                              double* dxr = dx.data() + r * c;
                              for (std::size_t j = 0; j < c; ++j) {
                                  const double gg = gv[j] * gr[j];
                                  dxr[j] += inv[r] * (gg - mean_gg - xhr[j] * mean_ggx);
                              }
                          }
                      }
                  });
}

Var Tape::rms_norm(Var x, Var gamma, Var beta, double epsilon) {
    const Tensor& xv = value(x);
    const Tensor& gv = value(gamma);
    const std::size_t c = trailing_dim(xv.shape());
    if (gv.ndim() != 1 || gv.numel() != c) {
        throw ShapeError("rms_norm: gamma " + shape_to_string(gv.shape()) +
                         " does not match channel count " + std::to_string(c));
    }
    const bool with_beta = beta.valid();
    if (with_beta) {
        const Tensor& bv = value(beta);
        if (bv.ndim() != 1 || bv.numel() != c) {
            throw ShapeError("rms_norm: beta " + shape_to_string(bv.shape()) +
                             " does not match channel count " + std::to_string(c));
        }
    }
    if (epsilon < 0.0) throw ParameterError("rms_norm: epsilon must be nonnegative");
    const std::size_t rows = xv.numel() / c;
    const double* bp = with_beta ? value(beta).data() : nullptr;
    Tensor out(xv.shape());
    std::vector<double> rfac(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * c;
        double ms = 0.0;
        for (std::size_t j = 0; j < c; ++j) ms += in[j] * in[j];
        ms /= static_cast<double>(c);
        rfac[r] = 1.0 / std::sqrt(ms + epsilon);
        double* o = out.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) {
            o[j] = gv[j] * in[j] * rfac[r];
            if (bp) o[j] += bp[j];
        }
    }
    std::vector<Var> parents = {x, gamma};
    if (with_beta) parents.push_back(beta);
    const std::size_t xi = x.idx, gi = gamma.idx;
    const std::size_t bi = with_beta ? beta.idx : Var::npos;
    return record("rms_norm", std::move(out), std::move(parents),
                  [xi, gi, bi, rows, c, rfac = std::move(rfac)](Tape& t, std::size_t self) {
                      const Tensor& g = t.grad_buffer(self);
                      const Tensor& gv = t.nodes_[gi].value;
                      const Tensor& xval = t.nodes_[xi].value;
                      const bool want_x = t.nodes_[xi].requires_grad;
                      const bool want_g = t.nodes_[gi].requires_grad;
                      const bool want_b = bi != Var::npos && t.nodes_[bi].requires_grad;
                      for (std::size_t r = 0; r < rows; ++r) {
                          const double* gr = g.data() + r * c;
                          const double* xr = xval.data() + r * c;
                          const double rf = rfac[r];
                          if (want_g) {
                              Tensor& dg = t.grad_buffer(gi);
                              for (std::size_t j = 0; j < c; ++j) dg[j] += gr[j] * xr[j] * rf;
                          }
                          if (want_b) {
                              Tensor& db = t.grad_buffer(bi);
                              for (std::size_t j = 0; j < c; ++j) db[j] += gr[j];
                          }
                          if (want_x) {
                              double dot = 0.0;
                              for (std::size_t j = 0; j < c; ++j) dot += gv[j] * gr[j] * xr[j];
                              const double k = rf * rf * rf * dot / static_cast<double>(c);
                              Tensor& dx = t.grad_buffer(xi);
                              double* dxr = dx.data() + r * c;
                              for (std::size_t j = 0; j < c; ++j)
                                  dxr[j] += rf * gv[j] * gr[j] - k * xr[j];
                          }
                      }
                  });
}

Var Tape::dynamic_pointwise(Var x, Var alpha, Var shift, Var gamma, Var beta,
                            const ScalarFn& f, const ScalarFn& df, std::string name) {
    const Tensor& xv = value(x);
    const Tensor& av = value(alpha);
    const Tensor& gv = value(gamma);
    const Tensor& bv = value(beta);
    const std::size_t c = trailing_dim(xv.shape());
    if (av.numel() != 1) {
        throw ShapeError("dynamic_pointwise: alpha must be a scalar, got " +
                         shape_to_string(av.shape()));
    }
    if (gv.ndim() != 1 || gv.numel() != c || bv.ndim() != 1 || bv.numel() != c) {
        throw ShapeError("dynamic_pointwise: gamma " + shape_to_string(gv.shape()) + " / beta " +
                         shape_to_string(bv.shape()) + " do not match channel count " +
                         std::to_string(c));
    }
    const bool with_shift = shift.valid();
    bool shift_per_channel = false;
    if (with_shift) {
        const Tensor& sv = value(shift);
        if (sv.numel() == 1) {
            shift_per_channel = false;
        } else if (sv.ndim() == 1 && sv.numel() == c) {
            shift_per_channel = true;
        } else {
            throw ShapeError("dynamic_pointwise: shift must be scalar or length-" +
                             std::to_string(c) + " vector, got " + shape_to_string(sv.shape()));
        }
    }
    const std::size_t rows = xv.numel() / c;
    const double a = av[0];
    const double* sp = with_shift ? value(shift).data() : nullptr;
    Tensor out(xv.shape());
    Tensor fu(xv.shape());
    Tensor dfu(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c; ++j) {
            const std::size_t i = r * c + j;
            double u = a * xv[i];
            if (sp) u += shift_per_channel ? sp[j] : sp[0];
            fu[i] = f(u);
            dfu[i] = df(u);
            out[i] = gv[j] * fu[i] + bv[j];
        }
    }
    std::vector<Var> parents = {x, alpha, gamma, beta};
    if (with_shift) parents.push_back(shift);
    const std::size_t xi = x.idx, ai = alpha.idx, gi = gamma.idx, bi = beta.idx;
    const std::size_t si = with_shift ? shift.idx : Var::npos;
    return record(std::move(name), std::move(out), std::move(parents),
                  [xi, ai, gi, bi, si, rows, c, a, shift_per_channel,
                   fu = std::move(fu), dfu = std::move(dfu)](Tape& t, std::size_t self) {
                      const Tensor& g = t.grad_buffer(self);
                      const Tensor& gv = t.nodes_[gi].value;
                      const Tensor& xval = t.nodes_[xi].value;
                      const bool want_x = t.nodes_[xi].requires_grad;
                      const bool want_a = t.nodes_[ai].requires_grad;
                      const bool want_g = t.nodes_[gi].requires_grad;
                      const bool want_b = t.nodes_[bi].requires_grad;
                      const bool want_s = si != Var::npos && t.nodes_[si].requires_grad;
                      double dacc = 0.0;
                      for (std::size_t r = 0; r < rows; ++r) {
                          for (std::size_t j = 0; j < c; ++j) {
                              const std::size_t i = r * c + j;
                              const double gd = g[i] * gv[j] * dfu[i];
                              if (want_x) t.grad_buffer(xi)[i] += gd * a;
                              if (want_a) dacc += gd * xval[i];
                              if (want_s) t.grad_buffer(si)[shift_per_channel ? j : 0] += gd;
                              if (want_g) t.grad_buffer(gi)[j] += g[i] * fu[i];
                              if (want_b) t.grad_buffer(bi)[j] += g[i];
                          }
                      }
                      if (want_a) t.grad_buffer(ai)[0] += dacc;
                  });
}

Var Tape::softmax_cross_entropy(Var logits, std::vector<std::int64_t> labels) {
    const Tensor& zv = value(logits);
    if (zv.ndim() != 2) {
        throw ShapeError("softmax_cross_entropy: logits must be 2-d, got " +
                         shape_to_string(zv.shape()));
    }
    const std::size_t b = zv.dim(0), k = zv.dim(1);
    if (labels.size() != b) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(b) + " rows");
    }
    for (std::int64_t y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw Error(Error::Category::invalid_argument,
                        "softmax_cross_entropy: label " + std::to_string(y) +
                            " out of range for " + std::to_string(k) + " classes");
        }
    }
    Tensor probs({b, k});
    double loss = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
        const double* z = zv.data() + r * k;
        double mx = z[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < k; ++j) denom += std::exp(z[j] - mx);
        const double lse = mx + std::log(denom);
        loss += lse - z[labels[r]];
        double* p = probs.data() + r * k;
        for (std::size_t j = 0; j < k; ++j) p[j] = std::exp(z[j] - lse);
    }
    loss /= static_cast<double>(b);
    const std::size_t zi = logits.idx;
    return record("softmax_cross_entropy", Tensor::scalar(loss), {logits},
                  [zi, b, k, probs = std::move(probs), labels = std::move(labels)](
                      Tape& t, std::size_t self) {
                      const double g = t.grad_buffer(self)[0] / static_cast<double>(b);
                      Tensor& dz = t.grad_buffer(zi);
                      for (std::size_t r = 0; r < b; ++r) {
                          const double* p = probs.data() + r * k;
                          double* d = dz.data() + r * k;
                          for (std::size_t j = 0; j < k; ++j) d[j] += g * p[j];
                          d[labels[r]] -= g;
                      }
                  });
}

Var Tape::custom(std::string op, Tensor value, std::vector<Var> parents,
                 std::function<void(Tape&, std::size_t)> backward) {
    return record(std::move(op), std::move(value), std::move(parents), std::move(backward));
}

} // namespace derfkit
