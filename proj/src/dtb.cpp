#include "mdsep/dtb.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace mdsep {
namespace {

// All supported targets are little-endian IEEE-754; we write native bytes and
// assert the assumption once at compile time for the integer side.
static_assert(sizeof(float) == 4 && sizeof(double) == 8);

constexpr char kMagic[4] = {'D', 'T', 'B', '1'};

template <typename T>
void save_impl(const Tensor<T>& t, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open for writing: " + path);
    f.write(kMagic, 4);
    const std::uint8_t dtype = sizeof(T) == 4 ? 0 : 1;
    const std::uint8_t rank = static_cast<std::uint8_t>(t.rank());
    f.put(static_cast<char>(dtype));
    f.put(static_cast<char>(rank));
    for (std::size_t i = 0; i < t.rank(); ++i) {
        std::uint64_t d = t.dim(i);
        f.write(reinterpret_cast<const char*>(&d), 8);
    }
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (!f) throw DataError("write failed: " + path);
}

struct Header {
    int dtype;
    std::vector<std::size_t> shape;
    std::size_t count;
};

Header read_header(std::ifstream& f, const std::string& path) {
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("bad DTB magic in " + path);
    int dtype = f.get();
    int rank = f.get();
    if (dtype < 0 || dtype > 1 || rank <= 0)
        throw DataError("bad DTB header in " + path);
    Header h;
    h.dtype = dtype;
    h.count = 1;
    for (int i = 0; i < rank; ++i) {
        std::uint64_t d = 0;
        f.read(reinterpret_cast<char*>(&d), 8);
        if (!f || d == 0) throw DataError("bad DTB dimension in " + path);
        h.shape.push_back(static_cast<std::size_t>(d));
        h.count *= static_cast<std::size_t>(d);
    }
    return h;
}

template <typename Out>
Tensor<Out> load_impl(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open DTB file: " + path);
    Header h = read_header(f, path);
    Tensor<Out> t(h.shape);
    if (h.dtype == (sizeof(Out) == 4 ? 0 : 1)) {
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(h.count * sizeof(Out)));
        if (!f) throw DataError("truncated DTB payload in " + path);
    } else if (h.dtype == 0) {
        std::vector<float> buf(h.count);
        f.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(h.count * 4));
        if (!f) throw DataError("truncated DTB payload in " + path);
        for (std::size_t i = 0; i < h.count; ++i) t[i] = static_cast<Out>(buf[i]);
    } else {
        std::vector<double> buf(h.count);
        f.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(h.count * 8));
        if (!f) throw DataError("truncated DTB payload in " + path);
        for (std::size_t i = 0; i < h.count; ++i) t[i] = static_cast<Out>(buf[i]);
    }
    return t;
}

}  // namespace

void dtb_save(const Tensor<float>& t, const std::string& path) { save_impl(t, path); }
void dtb_save(const Tensor<double>& t, const std::string& path) { save_impl(t, path); }

Tensor<float> dtb_load_f32(const std::string& path) { return load_impl<float>(path); }
Tensor<double> dtb_load_f64(const std::string& path) { return load_impl<double>(path); }

int dtb_peek_dtype(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open DTB file: " + path);
    return read_header(f, path).dtype;
}

}  // namespace mdsep
