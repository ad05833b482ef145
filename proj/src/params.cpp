#include "noiselab/params.hpp"

#include "noiselab/errors.hpp"

namespace noiselab {

BlockLayout::BlockLayout(const std::vector<std::pair<std::string, std::pair<Index, Index>>>& shapes) {
  for (const auto& [name, shape] : shapes) {
    if (shape.first < 1 || shape.second < 1) {
      throw ConfigError("block '" + name + "' has an empty shape");
    }
    if (find(name)) throw ConfigError("duplicate block name '" + name + "'");
    blocks_.push_back({name, shape.first, shape.second, dim_});
    dim_ += shape.first * shape.second;
  }
}

std::optional<std::size_t> BlockLayout::find(std::string_view name) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].name == name) return i;
  }
  return std::nullopt;
}

const BlockInfo& BlockLayout::at(std::string_view name) const {
  auto i = find(name);
  if (!i) throw ConfigError("unknown block '" + std::string(name) + "'");
  return blocks_[*i];
}

bool BlockLayout::operator==(const BlockLayout& other) const {
  if (blocks_.size() != other.blocks_.size()) return false;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& a = blocks_[i];
    const auto& b = other.blocks_[i];
    if (a.name != b.name || a.rows != b.rows || a.cols != b.cols) return false;
  }
  return true;
}

ParamBlocks::ParamBlocks(LayoutPtr layout) : layout_(std::move(layout)) {
  flat_ = Vector::Zero(layout_->dim());
}

ParamBlocks::ParamBlocks(LayoutPtr layout, Vector flat) : layout_(std::move(layout)), flat_(std::move(flat)) {
  if (flat_.size() != layout_->dim()) {
    throw ConfigError("flat vector has size " + std::to_string(flat_.size()) + ", layout expects " +
                      std::to_string(layout_->dim()));
  }
}

ParamBlocks ParamBlocks::from_matrices(const std::vector<std::pair<std::string, Matrix>>& blocks) {
  std::vector<std::pair<std::string, std::pair<Index, Index>>> shapes;
  for (const auto& [name, m] : blocks) shapes.push_back({name, {m.rows(), m.cols()}});
  ParamBlocks p(std::make_shared<const BlockLayout>(shapes));
  for (std::size_t i = 0; i < blocks.size(); ++i) p.block(i) = blocks[i].second;
  return p;
}

void ParamBlocks::assign(const Vector& flat) {
  if (flat.size() != flat_.size()) throw ConfigError("flat vector size does not match layout");
  flat_ = flat;
}

Eigen::Map<Matrix> ParamBlocks::block(std::size_t index) {
  const auto& b = layout_->blocks().at(index);
  return Eigen::Map<Matrix>(flat_.data() + b.offset, b.rows, b.cols);
}

Eigen::Map<const Matrix> ParamBlocks::block(std::size_t index) const {
  const auto& b = layout_->blocks().at(index);
  return Eigen::Map<const Matrix>(flat_.data() + b.offset, b.rows, b.cols);
}

Eigen::Map<Matrix> ParamBlocks::block(std::string_view name) {
  const auto& b = layout_->at(name);
  return Eigen::Map<Matrix>(flat_.data() + b.offset, b.rows, b.cols);
}

Eigen::Map<const Matrix> ParamBlocks::block(std::string_view name) const {
  const auto& b = layout_->at(name);
  return Eigen::Map<const Matrix>(flat_.data() + b.offset, b.rows, b.cols);
}

double ParamBlocks::squared_norm(std::string_view name) const {
  const auto& b = layout_->at(name);
  return flat_.segment(b.offset, b.size()).squaredNorm();
}

}  // namespace noiselab
