#include "scenepainter/raster.hpp"

#include <algorithm>
#include <stdexcept>

namespace scenepainter {

std::size_t Mask::popcount() const noexcept {
    return static_cast<std::size_t>(std::count_if(storage().begin(), storage().end(), [](auto v) { return v != 0; }));
}

bool Mask::is_binary() const noexcept {
    return std::all_of(storage().begin(), storage().end(), [](auto v) { return v <= 1; });
}

bool Mask::subset_of(const Mask& other) const noexcept {
    if (!same_shape(other)) return false;
    for (std::size_t i = 0; i < size(); ++i)
        if ((*this)[i] && !other[i]) return false;
    return true;
}

Mask Mask::operator|(const Mask& other) const {
    if (!same_shape(other)) throw std::invalid_argument("mask shape mismatch");
    Mask out(height(), width());
    for (std::size_t i = 0; i < size(); ++i) out[i] = ((*this)[i] | other[i]) ? 1 : 0;
    return out;
}

Mask Mask::operator&(const Mask& other) const {
    if (!same_shape(other)) throw std::invalid_argument("mask shape mismatch");
    Mask out(height(), width());
    for (std::size_t i = 0; i < size(); ++i) out[i] = ((*this)[i] & other[i]) ? 1 : 0;
    return out;
}

Mask Mask::operator~() const {
    Mask out(height(), width());
    for (std::size_t i = 0; i < size(); ++i) out[i] = (*this)[i] ? 0 : 1;
    return out;
}

}  // namespace scenepainter
