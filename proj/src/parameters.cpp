#include "earshot/parameters.hpp"

#include <limits>

#include "binary_io.hpp"

namespace earshot {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_parameters(const ParameterStore& store, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.bytes("EARS", 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(store.size()));
  for (const auto& e : store.entries()) {
    if (e.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw InputError("parameter name too long: " + e.name);
    }
    w.le<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(e.value.rank()));
    for (Index ext : e.value.shape()) w.le<std::uint32_t>(static_cast<std::uint32_t>(ext));
    w.f64_array(e.value.raw(), static_cast<std::size_t>(e.value.size()));
  }
  w.write_file(path);
}

ParameterStore load_parameters(const std::filesystem::path& path) {
  auto r = io::ByteReader::from_file(path);
  r.expect_magic("EARS");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    r.fail("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.le<std::uint32_t>("parameter count");
  ParameterStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.le<std::uint16_t>("name length");
    std::string name = r.string(len, "name");
    const auto rank = r.le<std::uint8_t>("rank");
    Shape shape;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const auto ext = r.le<std::uint32_t>("extent");
      if (ext == 0) r.fail("zero extent in parameter '" + name + "'");
      shape.push_back(static_cast<Index>(ext));
    }
    Tensor t(shape);
    r.f64_array(t.raw(), static_cast<std::size_t>(t.size()), "parameter data");
    if (store.contains(name)) r.fail("duplicate parameter '" + name + "'");
    store.add(name, std::move(t));
  }
  r.expect_end();
  return store;
}

void load_parameters_into(ParameterStore& store, const std::filesystem::path& path) {
  const ParameterStore loaded = load_parameters(path);
  if (loaded.size() != store.size()) {
    throw FormatError(path.string() + ": holds " + std::to_string(loaded.size()) +
                      " parameters, model expects " + std::to_string(store.size()));
  }
  for (auto& e : store.entries()) {
    if (!loaded.contains(e.name)) {
      throw FormatError(path.string() + ": missing parameter '" + e.name + "'");
    }
    const auto& src = loaded.at(e.name).value;
    if (src.shape() != e.value.shape()) {
      throw FormatError(path.string() + ": parameter '" + e.name + "' has shape " +
                        shape_string(src.shape()) + ", expected " +
                        shape_string(e.value.shape()));
    }
    e.value = src;
  }
}

}  // namespace earshot
