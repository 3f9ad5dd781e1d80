#pragma once

// Dense float64 tensors with eager forward evaluation and reverse-mode
// differentiation over a retained graph.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sglab::diffcore {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
  public:
    using std::domain_error::domain_error;
};

class GraphError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

enum class OpTag : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    matmul,
    concat,
    slice,
    gather,
    pick,
    sum,
    log,
    exp,
    silu,
    rms_norm,
    masked_fill,
    scale,
    embedding_lookup,
    softmax_row,
    entropy_row,
    detach,
};

std::string_view op_name(OpTag tag);

/// Per-op parameters. Only the fields an op reads are meaningful.
///
/// - concat / slice / sum: `axis` (sum with axis = -1 reduces everything)
/// - slice: `[begin, end)` along `axis`
/// - gather / embedding_lookup: `indices` select rows of a 2-D input
/// - pick: `indices[i]` selects column of row i, output is 1-D
/// - matmul: `transpose_rhs` multiplies by the transpose of the second input
/// - masked_fill: `mask` (same size as input), filled with `fill_value`
/// - scale: `factor`
/// - rms_norm: `eps`
struct Attrs {
    int axis = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    std::vector<std::size_t> indices;
    std::vector<std::uint8_t> mask;
    double fill_value = 0.0;
    double factor = 1.0;
    double eps = 1e-6;
    bool transpose_rhs = false;
};

struct DiffNode {
    NodeId id = 0;
    Shape shape;
    OpTag op_tag = OpTag::leaf;
    std::vector<NodeId> parents;
    bool requires_grad = false;
    bool detached = false;
    Attrs attrs;

    std::span<const double> values() const {
        return external_ ? std::span<const double>(external_, size_) : std::span<const double>(owned_);
    }
    std::size_t size() const { return size_; }

  private:
    friend class Graph;
    std::vector<double> owned_;
    const double* external_ = nullptr;
    std::size_t size_ = 0;
};

/// Gradients of a backward root, keyed by node id.
class GradientMap {
  public:
    bool contains(NodeId id) const;
    std::span<const double> at(NodeId id) const;
    const Shape& shape(NodeId id) const;
    std::size_t size() const { return ids_.size(); }

    void insert(NodeId id, Shape shape, std::vector<double> grad);

  private:
    std::vector<NodeId> ids_;
    std::vector<Shape> shapes_;
    std::vector<std::vector<double>> grads_;
};

/// Owns every node of one computation. Node ids are creation indices, so
/// creation order is a valid topological order. Not thread safe; separate
/// graphs are independent.
class Graph {
  public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) = default;
    Graph& operator=(Graph&&) = default;

    NodeId leaf(Shape shape, std::vector<double> values, bool requires_grad = true);
    /// Leaf that reads caller-owned storage; `values` must outlive the graph.
    NodeId leaf_view(Shape shape, std::span<const double> values, bool requires_grad = true);

    NodeId apply(OpTag tag, std::span<const NodeId> inputs, const Attrs& attrs = {});
    NodeId apply(OpTag tag, std::initializer_list<NodeId> inputs, const Attrs& attrs = {}) {
        return apply(tag, std::span<const NodeId>(inputs.begin(), inputs.size()), attrs);
    }

    NodeId add(NodeId a, NodeId b) { return apply(OpTag::add, {a, b}); }
    NodeId sub(NodeId a, NodeId b) { return apply(OpTag::sub, {a, b}); }
    NodeId mul(NodeId a, NodeId b) { return apply(OpTag::mul, {a, b}); }
    NodeId matmul(NodeId a, NodeId b, bool transpose_rhs = false);
    NodeId concat(std::span<const NodeId> parts, int axis);
    NodeId slice(NodeId x, int axis, std::size_t begin, std::size_t end);
    NodeId gather(NodeId x, std::vector<std::size_t> rows);
    NodeId pick(NodeId x, std::vector<std::size_t> columns);
    NodeId sum(NodeId x, int axis = -1);
    NodeId log(NodeId x) { return apply(OpTag::log, {x}); }
    NodeId exp(NodeId x) { return apply(OpTag::exp, {x}); }
    NodeId silu(NodeId x) { return apply(OpTag::silu, {x}); }
    NodeId rms_norm(NodeId x, NodeId gain, double eps = 1e-6);
    NodeId masked_fill(NodeId x, std::vector<std::uint8_t> mask, double fill_value);
    NodeId scale(NodeId x, double factor);
    NodeId embedding_lookup(NodeId table, std::vector<std::size_t> token_ids);
    NodeId softmax_row(NodeId x) { return apply(OpTag::softmax_row, {x}); }
    /// Natural-log entropy of each row of a probability matrix; output is 1-D.
    NodeId entropy_row(NodeId x) { return apply(OpTag::entropy_row, {x}); }
    NodeId detach(NodeId x) { return apply(OpTag::detach, {x}); }

    const DiffNode& node(NodeId id) const;
    std::span<const double> values(NodeId id) const { return node(id).values(); }
    std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a scalar root. Every id in `wanted` is present in
    /// the result; ids the root does not depend on get zero gradients.
    GradientMap backward(NodeId root, std::span<const NodeId> wanted) const;
    GradientMap backward(NodeId root, std::initializer_list<NodeId> wanted) const {
        return backward(root, std::span<const NodeId>(wanted.begin(), wanted.size()));
    }

    std::size_t backward_calls() const { return backward_calls_; }

  private:
    NodeId push(DiffNode node, std::vector<double> values);
    void check_id(NodeId id) const;

    std::vector<DiffNode> nodes_;
    mutable std::size_t backward_calls_ = 0;
};

/// H = -sum p ln p with 0 ln 0 = 0. Rejects rows whose sum is off 1 by more
/// than 1e-9.
double entropy_of_row(std::span<const double> probs);

/// Scalar function of a flat point, returning its value and analytic
/// gradient.
using GradFunction = std::function<double(std::span<const double> point, std::vector<double>* grad)>;

/// Max over coordinates of |central difference - analytic| / max(1, |analytic|).
double finite_diff_check(const GradFunction& f, std::span<const double> point, double eps);

}  // namespace sglab::diffcore
