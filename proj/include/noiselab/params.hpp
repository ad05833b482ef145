#pragma once

#include "noiselab/linalg.hpp"

#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace noiselab {

struct BlockInfo {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  Index offset = 0;
  Index size() const { return rows * cols; }
};

// Ordered block shapes with their offsets into the flat parameter vector.
// Flattening is column-major within a block, blocks in declaration order.
class BlockLayout {
 public:
  explicit BlockLayout(const std::vector<std::pair<std::string, std::pair<Index, Index>>>& shapes);

  const std::vector<BlockInfo>& blocks() const { return blocks_; }
  std::optional<std::size_t> find(std::string_view name) const;
  const BlockInfo& at(std::string_view name) const;  // throws ConfigError
  Index dim() const { return dim_; }
  bool operator==(const BlockLayout& other) const;

 private:
  std::vector<BlockInfo> blocks_;
  Index dim_ = 0;
};

using LayoutPtr = std::shared_ptr<const BlockLayout>;

// The trainable state: one flat vector viewed through an immutable layout.
class ParamBlocks {
 public:
  ParamBlocks() = default;
  explicit ParamBlocks(LayoutPtr layout);
  ParamBlocks(LayoutPtr layout, Vector flat);  // throws ConfigError on size mismatch

  static ParamBlocks from_matrices(const std::vector<std::pair<std::string, Matrix>>& blocks);

  const BlockLayout& layout() const { return *layout_; }
  const LayoutPtr& layout_ptr() const { return layout_; }
  Index dim() const { return flat_.size(); }

  const Vector& flatten() const { return flat_; }
  ParamBlocks unflatten(const Vector& flat) const { return ParamBlocks(layout_, flat); }
  void assign(const Vector& flat);

  Eigen::Map<Matrix> block(std::string_view name);
  Eigen::Map<const Matrix> block(std::string_view name) const;
  Eigen::Map<Matrix> block(std::size_t index);
  Eigen::Map<const Matrix> block(std::size_t index) const;

  bool all_finite() const { return flat_.allFinite(); }
  double squared_norm() const { return flat_.squaredNorm(); }
  double squared_norm(std::string_view name) const;

 private:
  LayoutPtr layout_;
  Vector flat_;
};

}  // namespace noiselab
