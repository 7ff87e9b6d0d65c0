#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "freeseg/tensor.hpp"

namespace freeseg::fsegio {

// On-disk tensor record:
//   magic "FSEG" | u8 version | u8 dtype | u8 rank | u32 dims (LE) | payload
// Payload is row-major, little-endian. Masks are u8, images f32, label maps
// i32, model parameters f64.
inline constexpr char kMagic[4] = {'F', 'S', 'E', 'G'};
inline constexpr uint8_t kFormatVersion = 1;

enum class DType : uint8_t { U8 = 0, I32 = 1, F32 = 2, F64 = 3 };

size_t dtype_size(DType d);

struct RawTensor {
    DType dtype = DType::U8;
    std::vector<uint32_t> dims;
    std::vector<uint8_t> bytes;

    uint64_t element_count() const;
    bool operator==(const RawTensor&) const = default;
};

void write_record(std::ostream& os, const RawTensor& t);
RawTensor read_record(std::istream& is); // throws DataError on corruption

// conversions
RawTensor from_image(const ImageF32& img);
RawTensor from_mask(const MaskU8& m);
RawTensor from_masks(const std::vector<MaskU8>& ms); // (K,H,W) u8
RawTensor from_i32(const std::vector<int32_t>& v, std::vector<uint32_t> dims);
RawTensor from_tensor(const Tensor& t); // f64

ImageF32 to_image(const RawTensor& t);
MaskU8 to_mask(const RawTensor& t);
std::vector<MaskU8> to_masks(const RawTensor& t);
std::vector<int32_t> to_i32(const RawTensor& t);
Tensor to_tensor(const RawTensor& t);

} // namespace freeseg::fsegio
