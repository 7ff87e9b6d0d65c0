#include "freeseg/fseg_io.hpp"

#include <cstring>
#include <istream>
#include <limits>
#include <ostream>

#include "freeseg/errors.hpp"

namespace freeseg::fsegio {

size_t dtype_size(DType d) {
    switch (d) {
        case DType::U8: return 1;
        case DType::I32: return 4;
        case DType::F32: return 4;
        case DType::F64: return 8;
    }
    throw DataError("unknown dtype code");
}

uint64_t RawTensor::element_count() const {
    uint64_t n = 1;
    for (uint32_t d : dims) n *= d;
    return n;
}

namespace {

void put_u32(std::ostream& os, uint32_t v) {
    uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                    static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    uint8_t b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw DataError("corrupt container: truncated header");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

} // namespace

void write_record(std::ostream& os, const RawTensor& t) {
    os.write(kMagic, 4);
    const uint8_t version = kFormatVersion;
    const uint8_t dtype = static_cast<uint8_t>(t.dtype);
    const uint8_t rank = static_cast<uint8_t>(t.dims.size());
    os.write(reinterpret_cast<const char*>(&version), 1);
    os.write(reinterpret_cast<const char*>(&dtype), 1);
    os.write(reinterpret_cast<const char*>(&rank), 1);
    for (uint32_t d : t.dims) put_u32(os, d);
    os.write(reinterpret_cast<const char*>(t.bytes.data()),
             static_cast<std::streamsize>(t.bytes.size()));
    if (!os) throw DataError("failed writing tensor record");
}

RawTensor read_record(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("corrupt container: bad magic");
    uint8_t version = 0, dtype = 0, rank = 0;
    is.read(reinterpret_cast<char*>(&version), 1);
    is.read(reinterpret_cast<char*>(&dtype), 1);
    is.read(reinterpret_cast<char*>(&rank), 1);
    if (!is) throw DataError("corrupt container: truncated header");
    if (version != kFormatVersion)
        throw DataError("unknown format version " + std::to_string(version));
    if (dtype > static_cast<uint8_t>(DType::F64))
        throw DataError("corrupt container: unknown dtype code " + std::to_string(dtype));
    RawTensor t;
    t.dtype = static_cast<DType>(dtype);
    t.dims.resize(rank);
    uint64_t count = 1;
    for (auto& d : t.dims) {
        d = get_u32(is);
        count *= d;
        if (count > (1ull << 33)) throw DataError("corrupt container: implausible shape");
    }
    const uint64_t nbytes = count * dtype_size(t.dtype);
    t.bytes.resize(nbytes);
    is.read(reinterpret_cast<char*>(t.bytes.data()), static_cast<std::streamsize>(nbytes));
    if (static_cast<uint64_t>(is.gcount()) != nbytes)
        throw DataError("corrupt container: truncated payload");
    return t;
}

namespace {

template <typename T>
std::vector<uint8_t> pack(const std::vector<T>& v) {
    std::vector<uint8_t> out(v.size() * sizeof(T));
    std::memcpy(out.data(), v.data(), out.size());
    return out;
}

template <typename T>
std::vector<T> unpack(const RawTensor& t) {
    std::vector<T> out(t.element_count());
    if (t.bytes.size() != out.size() * sizeof(T)) throw DataError("payload size mismatch");
    std::memcpy(out.data(), t.bytes.data(), t.bytes.size());
    return out;
}

void expect(bool ok, const char* what) {
    if (!ok) throw DataError(std::string("shape mismatch: ") + what);
}

} // namespace

RawTensor from_image(const ImageF32& img) {
    return RawTensor{DType::F32,
                     {static_cast<uint32_t>(img.h), static_cast<uint32_t>(img.w), 3u},
                     pack(img.px)};
}

RawTensor from_mask(const MaskU8& m) {
    return RawTensor{DType::U8, {static_cast<uint32_t>(m.h), static_cast<uint32_t>(m.w)}, m.px};
}

RawTensor from_masks(const std::vector<MaskU8>& ms) {
    RawTensor t;
    t.dtype = DType::U8;
    const uint32_t k = static_cast<uint32_t>(ms.size());
    const uint32_t h = k ? static_cast<uint32_t>(ms[0].h) : 0;
    const uint32_t w = k ? static_cast<uint32_t>(ms[0].w) : 0;
    t.dims = {k, h, w};
    t.bytes.reserve(static_cast<size_t>(k) * h * w);
    for (const auto& m : ms) {
        expect(static_cast<uint32_t>(m.h) == h && static_cast<uint32_t>(m.w) == w,
               "ragged mask stack");
        t.bytes.insert(t.bytes.end(), m.px.begin(), m.px.end());
    }
    return t;
}

RawTensor from_i32(const std::vector<int32_t>& v, std::vector<uint32_t> dims) {
    RawTensor t{DType::I32, std::move(dims), pack(v)};
    expect(t.element_count() == v.size(), "i32 dims");
    return t;
}

RawTensor from_tensor(const Tensor& t) {
    RawTensor r;
    r.dtype = DType::F64;
    for (int d : t.shape()) r.dims.push_back(static_cast<uint32_t>(d));
    r.bytes.resize(static_cast<size_t>(t.size()) * 8);
    std::memcpy(r.bytes.data(), t.data(), r.bytes.size());
    return r;
}

ImageF32 to_image(const RawTensor& t) {
    expect(t.dtype == DType::F32 && t.dims.size() == 3 && t.dims[2] == 3, "image record");
    ImageF32 img;
    img.h = static_cast<int>(t.dims[0]);
    img.w = static_cast<int>(t.dims[1]);
    img.px = unpack<float>(t);
    return img;
}

MaskU8 to_mask(const RawTensor& t) {
    expect(t.dtype == DType::U8 && t.dims.size() == 2, "mask record");
    return MaskU8{static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]), t.bytes};
}

std::vector<MaskU8> to_masks(const RawTensor& t) {
    expect(t.dtype == DType::U8 && t.dims.size() == 3, "mask stack record");
    const int k = static_cast<int>(t.dims[0]);
    const int h = static_cast<int>(t.dims[1]);
    const int w = static_cast<int>(t.dims[2]);
    std::vector<MaskU8> out;
    out.reserve(static_cast<size_t>(k));
    const size_t plane = static_cast<size_t>(h) * w;
    for (int i = 0; i < k; ++i) {
        MaskU8 m{h, w, {}};
        m.px.assign(t.bytes.begin() + static_cast<long>(i * plane),
                    t.bytes.begin() + static_cast<long>((i + 1) * plane));
        out.push_back(std::move(m));
    }
    return out;
}

std::vector<int32_t> to_i32(const RawTensor& t) {
    expect(t.dtype == DType::I32, "i32 record");
    return unpack<int32_t>(t);
}

Tensor to_tensor(const RawTensor& t) {
    expect(t.dtype == DType::F64, "f64 record");
    std::vector<int> shape;
    for (uint32_t d : t.dims) shape.push_back(static_cast<int>(d));
    return Tensor::from(shape, unpack<double>(t));
}

} // namespace freeseg::fsegio
