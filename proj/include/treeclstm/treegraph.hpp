#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeclstm/errors.hpp"

namespace treeclstm {

using NodeId = std::size_t;

/// Rooted tree over node ids 0..node_count-1 with ordered child lists.
///
/// The topology carries no payload; per-node frames and labels live in
/// parallel arrays indexed by node id.
class TreeGraph {
 public:
  TreeGraph() = default;
  /// Validates the topology; throws StructureError on duplicate children,
  /// multiple parents, a parented root, cycles or unreachable nodes.
  TreeGraph(NodeId root, std::vector<std::vector<NodeId>> children);

  /// n nodes linked root 0 <- 1 <- ... <- n-1 (node n-1 is the only leaf).
  static TreeGraph chain(std::size_t n);

  std::size_t node_count() const { return children_.size(); }
  NodeId root() const { return root_; }
  const std::vector<NodeId>& children(NodeId j) const { return children_.at(j); }
  std::optional<NodeId> parent(NodeId j) const;
  bool is_leaf(NodeId j) const { return children_.at(j).empty(); }
  bool is_branching(NodeId j) const { return children_.at(j).size() >= 2; }
  std::vector<NodeId> leaves() const;

  nlohmann::json to_json() const;
  static TreeGraph from_json(const nlohmann::json& j);

  bool operator==(const TreeGraph&) const = default;

 private:
  NodeId root_ = 0;
  std::vector<std::vector<NodeId>> children_;
  std::vector<std::optional<NodeId>> parent_;
};

/// Post-order node sequence: every node appears after all of its children.
/// Children are visited in stored order.
std::vector<NodeId> topological_schedule(const TreeGraph& tree);

/// Maximal unary chains. Each chain starts at the root or at a child of a
/// branching node and is listed top (root side) to bottom.
std::vector<std::vector<NodeId>> branch_decompose(const TreeGraph& tree);

/// Sorted ids of nodes within `radius` tree edges of any branching node.
std::vector<NodeId> bifurcation_neighborhood(const TreeGraph& tree, std::size_t radius);

/// Fixed 15-node Tree-Moving-MNIST topology: three 3-node leaf chains
/// (ids 0-2, 3-5, 6-8), chains 0-2 and 3-5 merge into chain 9-11, which
/// merges with 6-8 into the root chain 12-14. Ids increase leaf to root; the
/// root is 14.
TreeGraph tree_moving_mnist_topology();

}  // namespace treeclstm
