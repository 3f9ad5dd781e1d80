#include "sglab/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <vector>

#include <Eigen/Core>

namespace sglab::diffcore {

std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "x" : "") << shape[i];
    }
    out << ']';
    return out.str();
}

std::string_view op_name(OpTag tag) {
    switch (tag) {
        case OpTag::leaf: return "leaf";
        case OpTag::add: return "add";
        case OpTag::sub: return "sub";
        case OpTag::mul: return "mul";
        case OpTag::matmul: return "matmul";
        case OpTag::concat: return "concat";
        case OpTag::slice: return "slice";
        case OpTag::gather: return "gather";
        case OpTag::pick: return "pick";
        case OpTag::sum: return "sum";
        case OpTag::log: return "log";
        case OpTag::exp: return "exp";
        case OpTag::silu: return "silu";
        case OpTag::rms_norm: return "rms_norm";
        case OpTag::masked_fill: return "masked_fill";
        case OpTag::scale: return "scale";
        case OpTag::embedding_lookup: return "embedding_lookup";
        case OpTag::softmax_row: return "softmax_row";
        case OpTag::entropy_row: return "entropy_row";
        case OpTag::detach: return "detach";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// GradientMap

bool GradientMap::contains(NodeId id) const {
    return std::find(ids_.begin(), ids_.end(), id) != ids_.end();
}

std::span<const double> GradientMap::at(NodeId id) const {
    auto it = std::find(ids_.begin(), ids_.end(), id);
    if (it == ids_.end()) {
        throw GraphError("gradient for node " + std::to_string(id) + " was not requested");
    }
    return grads_[static_cast<std::size_t>(it - ids_.begin())];
}

const Shape& GradientMap::shape(NodeId id) const {
    auto it = std::find(ids_.begin(), ids_.end(), id);
    if (it == ids_.end()) {
        throw GraphError("gradient for node " + std::to_string(id) + " was not requested");
    }
    return shapes_[static_cast<std::size_t>(it - ids_.begin())];
}

void GradientMap::insert(NodeId id, Shape shape, std::vector<double> grad) {
    ids_.push_back(id);
    shapes_.push_back(std::move(shape));
    grads_.push_back(std::move(grad));
}

// ---------------------------------------------------------------------------
// helpers

namespace {

[[noreturn]] void shape_mismatch(OpTag tag, const std::vector<const DiffNode*>& in, const std::string& why) {
    std::ostringstream msg;
    msg << op_name(tag) << ": " << why << " (input shapes";
    for (const auto* n : in) {
        msg << ' ' << shape_string(n->shape);
    }
    msg << ')';
    throw ShapeError(msg.str());
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

std::size_t last_extent(const Shape& shape) { return shape.empty() ? 1 : shape.back(); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

auto cmap(const double* p, std::size_t r, std::size_t c) {
    return ConstMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
auto mmap(double* p, std::size_t r, std::size_t c) {
    return MutMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

// Eigen's matrix-vector and small-product paths peel leading elements up to
// an aligned address, so the summation order depends on where the operands
// live. Staging misaligned operands in aligned scratch buffers makes every
// product a function of shapes and values only.
using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

bool is_aligned(const double* p) { return reinterpret_cast<std::uintptr_t>(p) % EIGEN_MAX_ALIGN_BYTES == 0; }

const double* staged(const double* p, std::size_t n, AlignedBuffer& buf) {
    if (is_aligned(p)) return p;
    buf.assign(p, p + n);
    return buf.data();
}

template <class Kernel>
void with_aligned(const double* a, std::size_t na, const double* b, std::size_t nb, double* c, std::size_t nc,
                  Kernel kernel) {
    thread_local AlignedBuffer ba, bb, bc;
    const double* pa = staged(a, na, ba);
    const double* pb = staged(b, nb, bb);
    if (is_aligned(c)) {
        kernel(pa, pb, c);
        return;
    }
    bc.assign(c, c + nc);
    kernel(pa, pb, bc.data());
    std::copy(bc.begin(), bc.end(), c);
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    with_aligned(a, m * k, b, k * n, c, m * n, [&](const double* pa, const double* pb, double* pc) {
        mmap(pc, m, n).noalias() += cmap(pa, m, k) * cmap(pb, k, n);
    });
}

// C[m x n] += A[m x k] * B^T, B is [n x k]
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    with_aligned(a, m * k, b, n * k, c, m * n, [&](const double* pa, const double* pb, double* pc) {
        mmap(pc, m, n).noalias() += cmap(pa, m, k) * cmap(pb, n, k).transpose();
    });
}

// C[k x n] += A^T * B, A is [m x k], B is [m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    with_aligned(a, m * k, b, m * n, c, k * n, [&](const double* pa, const double* pb, double* pc) {
        mmap(pc, k, n).noalias() += cmap(pa, m, k).transpose() * cmap(pb, m, n);
    });
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph construction

void Graph::check_id(NodeId id) const {
    if (id >= nodes_.size()) {
        throw GraphError("unknown node id " + std::to_string(id));
    }
}

const DiffNode& Graph::node(NodeId id) const {
    check_id(id);
    return nodes_[id];
}

NodeId Graph::push(DiffNode n, std::vector<double> values) {
    n.id = nodes_.size();
    n.size_ = values.size();
    n.owned_ = std::move(values);
    nodes_.push_back(std::move(n));
    return nodes_.back().id;
}

NodeId Graph::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    if (element_count(shape) != values.size()) {
        throw ShapeError("leaf: shape " + shape_string(shape) + " holds " + std::to_string(element_count(shape)) +
                         " values, got " + std::to_string(values.size()));
    }
    DiffNode n;
    n.shape = std::move(shape);
    n.op_tag = OpTag::leaf;
    n.requires_grad = requires_grad;
    return push(std::move(n), std::move(values));
}

NodeId Graph::leaf_view(Shape shape, std::span<const double> values, bool requires_grad) {
    if (element_count(shape) != values.size()) {
        throw ShapeError("leaf: shape " + shape_string(shape) + " holds " + std::to_string(element_count(shape)) +
                         " values, got " + std::to_string(values.size()));
    }
    DiffNode n;
    n.shape = std::move(shape);
    n.op_tag = OpTag::leaf;
    n.requires_grad = requires_grad;
    n.id = nodes_.size();
    n.external_ = values.data();
    n.size_ = values.size();
    nodes_.push_back(std::move(n));
    return nodes_.back().id;
}

NodeId Graph::matmul(NodeId a, NodeId b, bool transpose_rhs) {
    Attrs at;
    at.transpose_rhs = transpose_rhs;
    return apply(OpTag::matmul, {a, b}, at);
}

NodeId Graph::concat(std::span<const NodeId> parts, int axis) {
    Attrs at;
    at.axis = axis;
    return apply(OpTag::concat, parts, at);
}

NodeId Graph::slice(NodeId x, int axis, std::size_t begin, std::size_t end) {
    Attrs at;
    at.axis = axis;
    at.begin = begin;
    at.end = end;
    return apply(OpTag::slice, {x}, at);
}

NodeId Graph::gather(NodeId x, std::vector<std::size_t> rows) {
    Attrs at;
    at.indices = std::move(rows);
    return apply(OpTag::gather, {x}, at);
}

NodeId Graph::pick(NodeId x, std::vector<std::size_t> columns) {
    Attrs at;
    at.indices = std::move(columns);
    return apply(OpTag::pick, {x}, at);
}

NodeId Graph::sum(NodeId x, int axis) {
    Attrs at;
    at.axis = axis;
    return apply(OpTag::sum, {x}, at);
}

NodeId Graph::rms_norm(NodeId x, NodeId gain, double eps) {
    Attrs at;
    at.eps = eps;
    return apply(OpTag::rms_norm, {x, gain}, at);
}

NodeId Graph::masked_fill(NodeId x, std::vector<std::uint8_t> mask, double fill_value) {
    Attrs at;
    at.mask = std::move(mask);
    at.fill_value = fill_value;
    return apply(OpTag::masked_fill, {x}, at);
}

NodeId Graph::scale(NodeId x, double factor) {
    Attrs at;
    at.factor = factor;
    return apply(OpTag::scale, {x}, at);
}

NodeId Graph::embedding_lookup(NodeId table, std::vector<std::size_t> token_ids) {
    Attrs at;
    at.indices = std::move(token_ids);
    return apply(OpTag::embedding_lookup, {table}, at);
}

NodeId Graph::apply(OpTag tag, std::span<const NodeId> inputs, const Attrs& attrs) {
    std::vector<const DiffNode*> in;
    in.reserve(inputs.size());
    for (NodeId id : inputs) {
        check_id(id);
        in.push_back(&nodes_[id]);
    }
    auto arity = [&](std::size_t n) {
        if (in.size() != n) {
            shape_mismatch(tag, in, "expects " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
        }
    };

    DiffNode out;
    out.op_tag = tag;
    out.attrs = attrs;
    out.parents.assign(inputs.begin(), inputs.end());
    std::vector<double> y;

    switch (tag) {
        case OpTag::leaf:
            throw GraphError("apply: leaves are created with Graph::leaf");

        case OpTag::add:
        case OpTag::sub:
        case OpTag::mul: {
            arity(2);
            if (in[0]->shape != in[1]->shape) shape_mismatch(tag, in, "shapes differ");
            auto a = in[0]->values();
            auto b = in[1]->values();
            y.resize(a.size());
            if (tag == OpTag::add) {
                for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
            } else if (tag == OpTag::sub) {
                for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] - b[i];
            } else {
                for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
            }
            out.shape = in[0]->shape;
            break;
        }

        case OpTag::matmul: {
            arity(2);
            const auto& sa = in[0]->shape;
            const auto& sb = in[1]->shape;
            if (sa.size() != 2 || sb.size() != 2) shape_mismatch(tag, in, "operands must be 2-D");
            const std::size_t m = sa[0], k = sa[1];
            const std::size_t kb = attrs.transpose_rhs ? sb[1] : sb[0];
            const std::size_t n = attrs.transpose_rhs ? sb[0] : sb[1];
            if (k != kb) shape_mismatch(tag, in, "inner extents differ");
            y.assign(m * n, 0.0);
            if (attrs.transpose_rhs) {
                gemm_nt(in[0]->values().data(), in[1]->values().data(), y.data(), m, k, n);
            } else {
                gemm_nn(in[0]->values().data(), in[1]->values().data(), y.data(), m, k, n);
            }
            out.shape = {m, n};
            break;
        }

        case OpTag::concat: {
            if (in.empty()) shape_mismatch(tag, in, "needs at least one input");
            const auto rank = in[0]->shape.size();
            if (attrs.axis < 0 || static_cast<std::size_t>(attrs.axis) >= rank) shape_mismatch(tag, in, "bad axis");
            const auto axis = static_cast<std::size_t>(attrs.axis);
            Shape shape = in[0]->shape;
            shape[axis] = 0;
            for (const auto* p : in) {
                if (p->shape.size() != rank) shape_mismatch(tag, in, "ranks differ");
                for (std::size_t d = 0; d < rank; ++d) {
                    if (d != axis && p->shape[d] != in[0]->shape[d]) shape_mismatch(tag, in, "off-axis extents differ");
                }
                shape[axis] += p->shape[axis];
            }
            const AxisSplit s = split_axis(shape, axis);
            y.resize(element_count(shape));
            std::size_t offset = 0;
            for (const auto* p : in) {
                const std::size_t block = p->shape[axis] * s.inner;
                auto v = p->values();
                for (std::size_t o = 0; o < s.outer; ++o) {
                    std::copy_n(v.data() + o * block, block, y.data() + o * s.extent * s.inner + offset);
                }
                offset += block;
            }
            out.shape = std::move(shape);
            break;
        }

        case OpTag::slice: {
            arity(1);
            const auto rank = in[0]->shape.size();
            if (attrs.axis < 0 || static_cast<std::size_t>(attrs.axis) >= rank) shape_mismatch(tag, in, "bad axis");
            const auto axis = static_cast<std::size_t>(attrs.axis);
            if (attrs.begin >= attrs.end || attrs.end > in[0]->shape[axis]) {
                shape_mismatch(tag, in, "range [" + std::to_string(attrs.begin) + ", " + std::to_string(attrs.end) +
                                            ") out of bounds");
            }
            const AxisSplit s = split_axis(in[0]->shape, axis);
            const std::size_t len = attrs.end - attrs.begin;
            auto v = in[0]->values();
            y.resize(s.outer * len * s.inner);
            for (std::size_t o = 0; o < s.outer; ++o) {
                std::copy_n(v.data() + (o * s.extent + attrs.begin) * s.inner, len * s.inner,
                            y.data() + o * len * s.inner);
            }
            out.shape = in[0]->shape;
            out.shape[axis] = len;
            break;
        }

        case OpTag::gather:
        case OpTag::embedding_lookup: {
            arity(1);
            if (in[0]->shape.size() != 2) shape_mismatch(tag, in, "table must be 2-D");
            const std::size_t rows = in[0]->shape[0], cols = in[0]->shape[1];
            auto v = in[0]->values();
            y.resize(attrs.indices.size() * cols);
            for (std::size_t r = 0; r < attrs.indices.size(); ++r) {
                const std::size_t idx = attrs.indices[r];
                if (idx >= rows) {
                    shape_mismatch(tag, in, "index " + std::to_string(idx) + " out of range for " +
                                                std::to_string(rows) + " rows");
                }
                std::copy_n(v.data() + idx * cols, cols, y.data() + r * cols);
            }
            out.shape = {attrs.indices.size(), cols};
            break;
        }

        case OpTag::pick: {
            arity(1);
            if (in[0]->shape.size() != 2) shape_mismatch(tag, in, "input must be 2-D");
            const std::size_t rows = in[0]->shape[0], cols = in[0]->shape[1];
            if (attrs.indices.size() != rows) shape_mismatch(tag, in, "needs one column index per row");
            auto v = in[0]->values();
            y.resize(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                if (attrs.indices[r] >= cols) shape_mismatch(tag, in, "column index out of range");
                y[r] = v[r * cols + attrs.indices[r]];
            }
            out.shape = {rows};
            break;
        }

        case OpTag::sum: {
            arity(1);
            auto v = in[0]->values();
            if (attrs.axis < 0) {
                double acc = 0.0;
                for (double x : v) acc += x;
                y = {acc};
                out.shape = {};
            } else {
                const auto axis = static_cast<std::size_t>(attrs.axis);
                if (axis >= in[0]->shape.size()) shape_mismatch(tag, in, "bad axis");
                const AxisSplit s = split_axis(in[0]->shape, axis);
                y.assign(s.outer * s.inner, 0.0);
                for (std::size_t o = 0; o < s.outer; ++o)
                    for (std::size_t e = 0; e < s.extent; ++e)
                        for (std::size_t i = 0; i < s.inner; ++i)
                            y[o * s.inner + i] += v[(o * s.extent + e) * s.inner + i];
                out.shape = in[0]->shape;
                out.shape.erase(out.shape.begin() + static_cast<std::ptrdiff_t>(axis));
            }
            break;
        }

        case OpTag::log: {
            arity(1);
            auto v = in[0]->values();
            y.resize(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (!(v[i] > 0.0)) {
                    throw DomainError("log: non-positive input " + std::to_string(v[i]) + " at element " +
                                      std::to_string(i));
                }
                y[i] = std::log(v[i]);
            }
            out.shape = in[0]->shape;
            break;
        }

        case OpTag::exp: {
            arity(1);
            auto v = in[0]->values();
            y.resize(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) y[i] = std::exp(v[i]);
            out.shape = in[0]->shape;
            break;
        }

        case OpTag::silu: {
            arity(1);
            auto v = in[0]->values();
            y.resize(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) y[i] = v[i] * sigmoid(v[i]);
            out.shape = in[0]->shape;
            break;
        }

        case OpTag::rms_norm: {
            arity(2);
            const std::size_t d = last_extent(in[0]->shape);
            if (in[1]->shape != Shape{d}) shape_mismatch(tag, in, "gain must match the last extent");
            auto x = in[0]->values();
            auto g = in[1]->values();
            y.resize(x.size());
            for (std::size_t r = 0; r < x.size() / d; ++r) {
                const double* xr = x.data() + r * d;
                double ms = 0.0;
                for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
                const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + attrs.eps);
                for (std::size_t j = 0; j < d; ++j) y[r * d + j] = xr[j] * inv * g[j];
            }
            out.shape = in[0]->shape;
            break;
        }

        case OpTag::masked_fill: {
            arity(1);
            auto v = in[0]->values();
            if (attrs.mask.size() != v.size()) shape_mismatch(tag, in, "mask size differs from input size");
            y.resize(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) y[i] = attrs.mask[i] ? attrs.fill_value : v[i];
            out.shape = in[0]->shape;
            break;
        }

        case OpTag::scale: {
            arity(1);
            auto v = in[0]->values();
            y.resize(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) y[i] = v[i] * attrs.factor;
            out.shape = in[0]->shape;
            break;
        }

        case OpTag::softmax_row: {
            arity(1);
            if (in[0]->shape.empty()) shape_mismatch(tag, in, "needs at least one axis");
            const std::size_t d = last_extent(in[0]->shape);
            auto v = in[0]->values();
            y.resize(v.size());
            for (std::size_t r = 0; r < v.size() / d; ++r) {
                const double* xr = v.data() + r * d;
                double* yr = y.data() + r * d;
                const double mx = *std::max_element(xr, xr + d);
                double z = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    yr[j] = std::exp(xr[j] - mx);
                    z += yr[j];
                }
                for (std::size_t j = 0; j < d; ++j) yr[j] /= z;
            }
            out.shape = in[0]->shape;
            break;
        }

        case OpTag::entropy_row: {
            arity(1);
            if (in[0]->shape.empty()) shape_mismatch(tag, in, "needs at least one axis");
            const std::size_t d = last_extent(in[0]->shape);
            auto v = in[0]->values();
            const std::size_t rows = v.size() / d;
            y.resize(rows);
            for (std::size_t r = 0; r < rows; ++r) y[r] = entropy_of_row(v.subspan(r * d, d));
            out.shape = in[0]->shape;
            out.shape.pop_back();
            break;
        }

        case OpTag::detach: {
            arity(1);
            auto v = in[0]->values();
            y.assign(v.begin(), v.end());
            out.shape = in[0]->shape;
            out.detached = true;
            break;
        }
    }

    if (!out.detached) {
        out.requires_grad = std::any_of(in.begin(), in.end(), [](const DiffNode* p) { return p->requires_grad; });
    }
    return push(std::move(out), std::move(y));
}

// ---------------------------------------------------------------------------
// Reverse sweep

GradientMap Graph::backward(NodeId root, std::span<const NodeId> wanted) const {
    check_id(root);
    for (NodeId id : wanted) check_id(id);
    if (nodes_[root].size() != 1) {
        throw GraphError("backward: root must be scalar, got shape " + shape_string(nodes_[root].shape));
    }
    ++backward_calls_;

    // A node needs a gradient when some wanted node reaches the root through it.
    std::vector<std::uint8_t> needed(root + 1, 0);
    for (NodeId id : wanted) {
        if (id <= root) needed[id] = 1;
    }
    for (NodeId id = 0; id <= root; ++id) {
        if (needed[id] || nodes_[id].detached) continue;
        for (NodeId p : nodes_[id].parents) {
            if (needed[p]) {
                needed[id] = 1;
                break;
            }
        }
    }

    std::vector<std::vector<double>> grad(root + 1);
    if (needed[root]) grad[root].assign(1, 1.0);

    auto acc = [&](NodeId p) -> std::vector<double>* {
        if (!needed[p]) return nullptr;
        if (grad[p].empty()) grad[p].assign(nodes_[p].size(), 0.0);
        return &grad[p];
    };

    for (NodeId id = root + 1; id-- > 0;) {
        if (grad[id].empty()) continue;
        const DiffNode& n = nodes_[id];
        if (n.detached || n.op_tag == OpTag::leaf) continue;
        const std::vector<double>& g = grad[id];
        const auto y = n.values();
        const Attrs& at = n.attrs;

        switch (n.op_tag) {
            case OpTag::leaf:
            case OpTag::detach:
                break;

            case OpTag::add:
            case OpTag::sub: {
                const double sign = n.op_tag == OpTag::add ? 1.0 : -1.0;
                if (auto* ga = acc(n.parents[0])) {
                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                }
                if (auto* gb = acc(n.parents[1])) {
                    for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += sign * g[i];
                }
                break;
            }

            case OpTag::mul: {
                auto a = nodes_[n.parents[0]].values();
                auto b = nodes_[n.parents[1]].values();
                if (auto* ga = acc(n.parents[0])) {
                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b[i];
                }
                if (auto* gb = acc(n.parents[1])) {
                    for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a[i];
                }
                break;
            }

            case OpTag::matmul: {
                const DiffNode& na = nodes_[n.parents[0]];
                const DiffNode& nb = nodes_[n.parents[1]];
                const std::size_t m = na.shape[0], k = na.shape[1];
                const std::size_t cols = n.shape[1];
                if (at.transpose_rhs) {
                    // C = A B^T with B [cols x k]
                    if (auto* ga = acc(n.parents[0])) gemm_nn(g.data(), nb.values().data(), ga->data(), m, cols, k);
                    if (auto* gb = acc(n.parents[1])) gemm_tn(g.data(), na.values().data(), gb->data(), m, cols, k);
                } else {
                    // C = A B with B [k x cols]
                    if (auto* ga = acc(n.parents[0])) gemm_nt(g.data(), nb.values().data(), ga->data(), m, cols, k);
                    if (auto* gb = acc(n.parents[1])) gemm_tn(na.values().data(), g.data(), gb->data(), m, k, cols);
                }
                break;
            }

            case OpTag::concat: {
                const auto axis = static_cast<std::size_t>(at.axis);
                const AxisSplit s = split_axis(n.shape, axis);
                std::size_t offset = 0;
                for (NodeId p : n.parents) {
                    const std::size_t block = nodes_[p].shape[axis] * s.inner;
                    if (auto* gp = acc(p)) {
                        for (std::size_t o = 0; o < s.outer; ++o) {
                            const double* src = g.data() + o * s.extent * s.inner + offset;
                            double* dst = gp->data() + o * block;
                            for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                        }
                    }
                    offset += block;
                }
                break;
            }

            case OpTag::slice: {
                if (auto* gp = acc(n.parents[0])) {
                    const auto axis = static_cast<std::size_t>(at.axis);
                    const AxisSplit s = split_axis(nodes_[n.parents[0]].shape, axis);
                    const std::size_t len = at.end - at.begin;
                    for (std::size_t o = 0; o < s.outer; ++o) {
                        const double* src = g.data() + o * len * s.inner;
                        double* dst = gp->data() + (o * s.extent + at.begin) * s.inner;
                        for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                    }
                }
                break;
            }

            case OpTag::gather:
            case OpTag::embedding_lookup: {
                if (auto* gp = acc(n.parents[0])) {
                    const std::size_t cols = n.shape[1];
                    for (std::size_t r = 0; r < at.indices.size(); ++r) {
                        double* dst = gp->data() + at.indices[r] * cols;
                        const double* src = g.data() + r * cols;
                        for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
                    }
                }
                break;
            }

            case OpTag::pick: {
                if (auto* gp = acc(n.parents[0])) {
                    const std::size_t cols = nodes_[n.parents[0]].shape[1];
                    for (std::size_t r = 0; r < at.indices.size(); ++r) (*gp)[r * cols + at.indices[r]] += g[r];
                }
                break;
            }

            case OpTag::sum: {
                if (auto* gp = acc(n.parents[0])) {
                    if (at.axis < 0) {
                        for (double& v : *gp) v += g[0];
                    } else {
                        const AxisSplit s = split_axis(nodes_[n.parents[0]].shape, static_cast<std::size_t>(at.axis));
                        for (std::size_t o = 0; o < s.outer; ++o)
                            for (std::size_t e = 0; e < s.extent; ++e)
                                for (std::size_t i = 0; i < s.inner; ++i)
                                    (*gp)[(o * s.extent + e) * s.inner + i] += g[o * s.inner + i];
                    }
                }
                break;
            }

            case OpTag::log: {
                if (auto* gp = acc(n.parents[0])) {
                    auto x = nodes_[n.parents[0]].values();
                    for (std::size_t i = 0; i < g.size(); ++i) (*gp)[i] += g[i] / x[i];
                }
                break;
            }

            case OpTag::exp: {
                if (auto* gp = acc(n.parents[0])) {
                    for (std::size_t i = 0; i < g.size(); ++i) (*gp)[i] += g[i] * y[i];
                }
                break;
            }

            case OpTag::silu: {
                if (auto* gp = acc(n.parents[0])) {
                    auto x = nodes_[n.parents[0]].values();
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        const double s = sigmoid(x[i]);
                        (*gp)[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                    }
                }
                break;
            }

            case OpTag::rms_norm: {
                auto x = nodes_[n.parents[0]].values();
                auto gain = nodes_[n.parents[1]].values();
                const std::size_t d = gain.size();
                auto* gx = acc(n.parents[0]);
                auto* gg = acc(n.parents[1]);
                for (std::size_t r = 0; r < x.size() / d; ++r) {
                    const double* xr = x.data() + r * d;
                    const double* gr = g.data() + r * d;
                    double ms = 0.0;
                    for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
                    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + at.eps);
                    if (gg) {
                        for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gr[j] * xr[j] * inv;
                    }
                    if (gx) {
                        // dx = inv * (gain*g - xhat * mean(gain*g*xhat))
                        double dot = 0.0;
                        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * gain[j] * xr[j] * inv;
                        dot /= static_cast<double>(d);
                        for (std::size_t j = 0; j < d; ++j) {
                            (*gx)[r * d + j] += inv * (gr[j] * gain[j] - xr[j] * inv * dot);
                        }
                    }
                }
                break;
            }

            case OpTag::masked_fill: {
                if (auto* gp = acc(n.parents[0])) {
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        if (!at.mask[i]) (*gp)[i] += g[i];
                    }
                }
                break;
            }

            case OpTag::scale: {
                if (auto* gp = acc(n.parents[0])) {
                    for (std::size_t i = 0; i < g.size(); ++i) (*gp)[i] += g[i] * at.factor;
                }
                break;
            }

            case OpTag::softmax_row: {
                if (auto* gp = acc(n.parents[0])) {
                    const std::size_t d = last_extent(n.shape);
                    for (std::size_t r = 0; r < y.size() / d; ++r) {
                        const double* yr = y.data() + r * d;
                        const double* gr = g.data() + r * d;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
                        for (std::size_t j = 0; j < d; ++j) (*gp)[r * d + j] += yr[j] * (gr[j] - dot);
                    }
                }
                break;
            }

            case OpTag::entropy_row: {
                // dH/dp = -(ln p + 1); zero-probability entries receive no gradient.
                if (auto* gp = acc(n.parents[0])) {
                    auto p = nodes_[n.parents[0]].values();
                    const std::size_t d = last_extent(nodes_[n.parents[0]].shape);
                    for (std::size_t i = 0; i < p.size(); ++i) {
                        if (p[i] > 0.0) (*gp)[i] -= g[i / d] * (std::log(p[i]) + 1.0);
                    }
                }
                break;
            }
        }
    }

    GradientMap out;
    for (NodeId id : wanted) {
        if (out.contains(id)) continue;
        std::vector<double> gv = (id <= root && !grad[id].empty()) ? grad[id] : std::vector<double>(nodes_[id].size(), 0.0);
        out.insert(id, nodes_[id].shape, std::move(gv));
    }
    return out;
}

// ---------------------------------------------------------------------------

double entropy_of_row(std::span<const double> probs) {
    double total = 0.0;
    for (double p : probs) {
        if (p < 0.0 || !std::isfinite(p)) {
            throw DomainError("entropy_of_row: invalid probability " + std::to_string(p));
        }
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        std::ostringstream msg;
        msg.precision(17);
        msg << "entropy_of_row: probabilities sum to " << total;
        throw DomainError(msg.str());
    }
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

double finite_diff_check(const GradFunction& f, std::span<const double> point, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");
    std::vector<double> analytic;
    f(point, &analytic);
    if (analytic.size() != point.size()) {
        throw ShapeError("finite_diff_check: gradient size differs from point size");
    }
    std::vector<double> x(point.begin(), point.end());
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + eps;
        const double up = f(x, nullptr);
        x[i] = saved - eps;
        const double down = f(x, nullptr);
        x[i] = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double err = std::abs(numeric - analytic[i]) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace sglab::diffcore
