#include "treeclstm/treegraph.hpp"

#include <algorithm>
#include <deque>

namespace treeclstm {

TreeGraph::TreeGraph(NodeId root, std::vector<std::vector<NodeId>> children)
    : root_(root), children_(std::move(children)), parent_(children_.size()) {
  const std::size_t n = children_.size();
  if (n == 0) throw StructureError("tree has no nodes");
  if (root_ >= n) throw StructureError("root id " + std::to_string(root_) + " out of range");
  for (NodeId j = 0; j < n; ++j) {
    for (NodeId c : children_[j]) {
      if (c >= n) throw StructureError("child id " + std::to_string(c) + " out of range");
      if (c == j) throw StructureError("node " + std::to_string(j) + " lists itself as a child");
      if (parent_[c].has_value()) {
        if (*parent_[c] == j) throw StructureError("duplicate child " + std::to_string(c) + " of node " + std::to_string(j));
        throw StructureError("node " + std::to_string(c) + " has more than one parent");
      }
      parent_[c] = j;
    }
  }
  if (parent_[root_].has_value()) throw StructureError("root " + std::to_string(root_) + " has a parent (cycle)");
  // With single parents everywhere, reachability from the root rules out cycles.
  std::vector<char> seen(n, 0);
  std::vector<NodeId> stack{root_};
  std::size_t visited = 0;
  while (!stack.empty()) {
    const NodeId j = stack.back();
    stack.pop_back();
    if (seen[j]) throw StructureError("cycle through node " + std::to_string(j));
    seen[j] = 1;
    ++visited;
    for (NodeId c : children_[j]) stack.push_back(c);
  }
  if (visited != n) {
    const auto orphan = std::find(seen.begin(), seen.end(), 0) - seen.begin();
    throw StructureError("node " + std::to_string(orphan) + " is not reachable from the root");
  }
}

TreeGraph TreeGraph::chain(std::size_t n) {
  std::vector<std::vector<NodeId>> children(n);
  for (NodeId j = 0; j + 1 < n; ++j) children[j] = {j + 1};
  return TreeGraph(0, std::move(children));
}

std::optional<NodeId> TreeGraph::parent(NodeId j) const { return parent_.at(j); }

std::vector<NodeId> TreeGraph::leaves() const {
  std::vector<NodeId> out;
  for (NodeId j = 0; j < node_count(); ++j) {
    if (is_leaf(j)) out.push_back(j);
  }
  return out;
}

nlohmann::json TreeGraph::to_json() const {
  return {{"nodes", node_count()}, {"root", root_}, {"children", children_}};
}

TreeGraph TreeGraph::from_json(const nlohmann::json& j) {
  try {
    const auto n = j.at("nodes").get<std::size_t>();
    auto children = j.at("children").get<std::vector<std::vector<NodeId>>>();
    if (children.size() != n) {
      throw StructureError("tree json: \"nodes\" is " + std::to_string(n) + " but \"children\" has " +
                           std::to_string(children.size()) + " entries");
    }
    return TreeGraph(j.at("root").get<NodeId>(), std::move(children));
  } catch (const nlohmann::json::exception& e) {
    throw StructureError(std::string("tree json: ") + e.what());
  }
}

std::vector<NodeId> topological_schedule(const TreeGraph& tree) {
  std::vector<NodeId> order;
  order.reserve(tree.node_count());
  // (node, next child index) frames of an explicit DFS.
  std::vector<std::pair<NodeId, std::size_t>> stack{{tree.root(), 0}};
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto& kids = tree.children(node);
    if (next < kids.size()) {
      const NodeId child = kids[next++];
      stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  if (order.size() != tree.node_count()) throw StructureError("schedule does not cover every node");
  return order;
}

std::vector<std::vector<NodeId>> branch_decompose(const TreeGraph& tree) {
  std::vector<std::vector<NodeId>> chains;
  std::vector<NodeId> starts{tree.root()};
  while (!starts.empty()) {
    NodeId j = starts.back();
    starts.pop_back();
    std::vector<NodeId> chain{j};
    while (tree.children(j).size() == 1) {
      j = tree.children(j).front();
      chain.push_back(j);
    }
    const auto& kids = tree.children(j);
    for (auto it = kids.rbegin(); it != kids.rend(); ++it) starts.push_back(*it);
    chains.push_back(std::move(chain));
  }
  return chains;
}

std::vector<NodeId> bifurcation_neighborhood(const TreeGraph& tree, std::size_t radius) {
  const std::size_t n = tree.node_count();
  std::vector<std::size_t> dist(n, SIZE_MAX);
  std::deque<NodeId> queue;
  for (NodeId j = 0; j < n; ++j) {
    if (tree.is_branching(j)) {
      dist[j] = 0;
      queue.push_back(j);
    }
  }
  while (!queue.empty()) {
    const NodeId j = queue.front();
    queue.pop_front();
    if (dist[j] == radius) continue;
    auto visit = [&](NodeId k) {
      if (dist[k] == SIZE_MAX) {
        dist[k] = dist[j] + 1;
        queue.push_back(k);
      }
    };
    for (NodeId c : tree.children(j)) visit(c);
    if (auto p = tree.parent(j)) visit(*p);
  }
  std::vector<NodeId> out;
  for (NodeId j = 0; j < n; ++j) {
    if (dist[j] <= radius) out.push_back(j);
  }
  return out;
}

TreeGraph tree_moving_mnist_topology() {
  std::vector<std::vector<NodeId>> children(15);
  for (NodeId base : {0u, 3u, 6u, 9u, 12u}) {
    children[base + 1] = {base};
    children[base + 2] = {base + 1};
  }
  children[9] = {2, 5};
  children[12] = {11, 8};
  return TreeGraph(14, std::move(children));
}

}  // namespace treeclstm
