#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "tck/coder.hpp"
#include "tck/codec.hpp"
#include "tck/config.hpp"
#include "tck/entropy.hpp"
#include "tck/errors.hpp"
#include "tck/taskworld.hpp"

namespace py = pybind11;
using namespace tck;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  Tensor t(shape);
  std::copy_n(a.data(), t.numel(), t.data());
  return t;
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array a(shape);
  std::copy_n(t.data(), t.numel(), a.mutable_data());
  return a;
}

py::bytes to_bytes(const Bytes& b) { return py::bytes(reinterpret_cast<const char*>(b.data()), b.size()); }

Bytes from_bytes(const py::bytes& b) {
  const std::string s = b;
  return Bytes(s.begin(), s.end());
}

}  // namespace

PYBIND11_MODULE(tck, m) {
  m.doc() = "learned multi-task feature compression toolkit";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<CorruptionError>(m, "CorruptionError", PyExc_RuntimeError);
  py::register_exception<VersionError>(m, "VersionError", PyExc_RuntimeError);
  py::register_exception<DigestError>(m, "DigestError", PyExc_RuntimeError);
  py::register_exception<PrerequisiteError>(m, "PrerequisiteError", PyExc_RuntimeError);

  py::class_<QuantSpec>(m, "QuantSpec")
      .def(py::init([](int t_min, int t_max) {
             QuantSpec s{t_min, t_max};
             s.validate();
             return s;
           }),
           py::arg("t_min") = -127, py::arg("t_max") = 127)
      .def_readonly("t_min", &QuantSpec::t_min)
      .def_readonly("t_max", &QuantSpec::t_max);

  m.def("quantize", [](const Array& x, const QuantSpec& spec) {
    const SymbolGrid g = quantize(to_tensor(x), spec);
    py::array_t<std::int32_t> out(std::vector<py::ssize_t>(g.shape.begin(), g.shape.end()));
    std::copy(g.symbols.begin(), g.symbols.end(), out.mutable_data());
    return out;
  }, py::arg("x"), py::arg("spec") = QuantSpec{});
  m.def("pmf_vector", &pmf_vector, py::arg("mu"), py::arg("sigma"), py::arg("spec") = QuantSpec{});
  m.def("discrete_entropy", &discrete_entropy, py::arg("mu"), py::arg("sigma"), py::arg("spec") = QuantSpec{});
  m.def("discrete_kl", &discrete_kl, py::arg("mu_p"), py::arg("sigma_p"), py::arg("mu_q"), py::arg("sigma_q"),
        py::arg("spec") = QuantSpec{});
  m.def("rate_estimate", [](const Array& z, const Array& mu, const Array& sigma, const QuantSpec& spec) {
    return rate_estimate(to_tensor(z), EntropyParams{to_tensor(mu), to_tensor(sigma)}, spec);
  }, py::arg("z"), py::arg("mu"), py::arg("sigma"), py::arg("spec") = QuantSpec{});
  m.def("synthesize_hyperprior", [](const Array& coeffs, const Array& bases, int h, int w) {
    return to_array(synthesize_hyperprior(to_tensor(coeffs), to_tensor(bases), h, w));
  }, py::arg("coeffs"), py::arg("bases"), py::arg("target_h"), py::arg("target_w"));

  py::class_<CdfTable>(m, "CdfTable")
      .def_readonly("precision", &CdfTable::precision)
      .def_readonly("offset", &CdfTable::offset)
      .def_readonly("cum", &CdfTable::cum)
      .def("bits", &CdfTable::bits);
  m.def("build_cdf", &build_cdf, py::arg("mu"), py::arg("sigma"), py::arg("spec") = QuantSpec{},
        py::arg("precision") = kDefaultPrecision);
  m.def("cdf_from_pmf", [](const std::vector<double>& pmf, int offset, int precision) {
    return cdf_from_pmf(pmf, offset, precision);
  }, py::arg("pmf"), py::arg("offset"), py::arg("precision") = kDefaultPrecision);
  m.def("encode_symbols", [](const std::vector<std::int32_t>& symbols, const std::vector<CdfTable>& tables,
                             const std::vector<int>& index) {
    const BitStream s = encode_symbols(symbols, tables, index);
    return py::make_tuple(to_bytes(s.bytes), s.bit_length);
  }, py::arg("symbols"), py::arg("tables"), py::arg("table_index") = std::vector<int>{});
  m.def("decode_symbols", [](const py::bytes& data, std::uint64_t bit_length, const std::vector<CdfTable>& tables,
                             std::size_t count, const std::vector<int>& index) {
    return decode_symbols(BitStream{from_bytes(data), bit_length}, tables, count, index);
  }, py::arg("data"), py::arg("bit_length"), py::arg("tables"), py::arg("count"),
        py::arg("table_index") = std::vector<int>{});

  py::class_<PortSpec>(m, "PortSpec")
      .def(py::init<int, int, int, int>(), py::arg("task_id"), py::arg("channels"), py::arg("height"),
           py::arg("width"))
      .def_readonly("task_id", &PortSpec::task_id)
      .def_readonly("channels", &PortSpec::channels)
      .def_readonly("height", &PortSpec::height)
      .def_readonly("width", &PortSpec::width);

  py::class_<AggregateCodec>(m, "Codec")
      .def(py::init([](const std::vector<PortSpec>& ports, const std::map<std::string, std::string>& overrides) {
             Settings s;
             for (const auto& [k, v] : overrides) s.set("codec." + k, v);
             return AggregateCodec(ports, codec_config(s));
           }),
           py::arg("ports"), py::arg("settings") = std::map<std::string, std::string>{})
      .def_static("load", &AggregateCodec::load)
      .def("save", &AggregateCodec::save)
      .def("digest", [](AggregateCodec& c) { return to_hex(c.digest()); })
      .def("latent_shape", &AggregateCodec::latent_shape)
      .def("compress", [](AggregateCodec& c, const std::vector<Array>& features, int h, int w) {
        std::vector<Tensor> fs;
        for (const auto& f : features) fs.push_back(to_tensor(f));
        const CompressResult r = c.compress(fs, h, w);
        py::list recon;
        for (const auto& t : r.reconstruction) recon.append(to_array(t));
        return py::make_tuple(to_bytes(r.stream.serialize()), recon, r.stream.bpp());
      }, py::arg("features"), py::arg("source_h"), py::arg("source_w"))
      .def("decompress", [](AggregateCodec& c, const py::bytes& stream) {
        const Bytes b = from_bytes(stream);
        const DecompressResult r = c.decompress(ContainerStream::parse(b));
        py::list out;
        for (const auto& t : r.features) out.append(to_array(t));
        return out;
      });

  m.def("stream_bpp", [](const py::bytes& stream) {
    const Bytes b = from_bytes(stream);
    return ContainerStream::parse(b).bpp();
  });

  py::class_<Settings>(m, "Settings")
      .def(py::init<>())
      .def("load_file", &Settings::load_file)
      .def("load_text", &Settings::load_text, py::arg("text"), py::arg("origin") = "<text>")
      .def("set", &Settings::set)
      .def("get", &Settings::get)
      .def("echo", &Settings::echo)
      .def("hash", &Settings::hash)
      .def_static("known_keys", &Settings::known_keys);

  m.def("generate_scene", [](std::uint64_t seed, int size) {
    const Scene s = generate_scene(seed, size);
    py::dict d;
    d["scene_class"] = s.scene_class;
    d["object_label"] = s.object_label;
    d["image"] = to_array(s.image);
    d["surface"] = to_array(s.surface);
    d["shading"] = to_array(s.shading);
    d["curvature"] = to_array(s.curvature);
    d["segmentation"] = s.segmentation;
    return d;
  }, py::arg("seed"), py::arg("size") = 32);
  m.def("task_names", [] {
    std::vector<std::string> names;
    for (const auto& t : all_tasks()) names.emplace_back(t.name);
    return names;
  });
}
