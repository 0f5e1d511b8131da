#include "tck/codec.hpp"

#include <set>

#include "tck/errors.hpp"
#include "tck/ops.hpp"

namespace tck {

namespace {

constexpr int kCodecFormat = 1;

std::unique_ptr<HyperPrior> make_prior(const CodecConfig& cfg) {
  if (cfg.prior == PriorKind::codebook) {
    CodebookPriorConfig c = cfg.codebook;
    c.latent_channels = cfg.latent_channels;
    c.seed = mix_seed(cfg.seed, 101);
    return std::make_unique<CodebookPrior>(c);
  }
  SpatialPriorConfig s = cfg.spatial;
  s.latent_channels = cfg.latent_channels;
  s.seed = mix_seed(cfg.seed, 102);
  return std::make_unique<SpatialPrior>(s);
}

Tensor as_batched(const Tensor& t) {
  if (t.rank() == 3) return t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)});
  return t;
}

std::uint16_t checked_u16(int v, const char* what) {
  if (v < 0 || v > 0xFFFF) throw DomainError(std::string(what) + " does not fit 16 bits");
  return static_cast<std::uint16_t>(v);
}

}  // namespace

double ContainerStream::bpp() const {
  const double pixels = static_cast<double>(source[0]) * source[1];
  if (pixels <= 0.0) throw DomainError("container has no source extents");
  return static_cast<double>(payload_bits()) / pixels;
}

Bytes ContainerStream::serialize() const {
  ByteWriter w;
  w.text("TCKS");
  w.u16(version);
  if (task_ids.size() > 255) throw DomainError("too many tasks for one container");
  w.u8(static_cast<std::uint8_t>(task_ids.size()));
  for (auto id : task_ids) w.u16(id);
  for (auto e : latent) w.u16(e);
  for (auto e : source) w.u16(e);
  w.raw(digest);
  for (const BitStream* s : {&side, &latent_payload}) {
    w.u32(static_cast<std::uint32_t>(s->bytes.size()));
    w.raw(s->bytes);
  }
  return w.take();
}

ContainerStream ContainerStream::parse(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.remaining() < 4 || r.text(4) != "TCKS") throw CorruptionError("not a TCKS container stream");
  ContainerStream c;
  c.version = r.u16();
  if (c.version != kContainerVersion) {
    throw VersionError("container version " + std::to_string(c.version) + " not supported (expected " +
                       std::to_string(kContainerVersion) + ")");
  }
  const int tasks = r.u8();
  for (int i = 0; i < tasks; ++i) c.task_ids.push_back(r.u16());
  for (auto& e : c.latent) e = r.u16();
  for (auto& e : c.source) e = r.u16();
  auto d = r.raw(32);
  std::copy(d.begin(), d.end(), c.digest.begin());
  for (BitStream* s : {&c.side, &c.latent_payload}) {
    const std::uint32_t len = r.u32();
    auto payload = r.raw(len);
    s->bytes.assign(payload.begin(), payload.end());
    s->bit_length = 8ull * len;
  }
  if (r.remaining() != 0) throw CorruptionError("trailing bytes after container payloads");
  return c;
}

AggregateCodec::AggregateCodec(std::vector<PortSpec> ports, const CodecConfig& cfg) : cfg_(cfg) {
  if (ports.empty() || ports.size() > 255) throw DomainError("codec needs between 1 and 255 ports");
  std::set<int> ids;
  for (const auto& p : ports) {
    if (!ids.insert(p.task_id).second) throw DomainError("duplicate task id " + std::to_string(p.task_id));
    if (p.height != ports[0].height || p.width != ports[0].width) {
      throw ShapeError("all ports must share spatial extents to be aggregated");
    }
    checked_u16(p.task_id, "task id");
  }
  cfg_.quant.validate();
  int concat = 0;
  for (const auto& p : ports) {
    TaskPort port{p, {}, {}};
    const std::string base = "port" + std::to_string(p.task_id);
    std::vector<LayerDesc> in, out;
    int aligned = p.channels;
    if (cfg_.peripheral_depth > 0) {
      aligned = cfg_.port_channels;
      in.push_back({LayerKind::conv3x3, p.channels, aligned});
      for (int i = 1; i < cfg_.peripheral_depth; ++i) {
        in.push_back({LayerKind::relu});
        in.push_back({LayerKind::conv3x3, aligned, aligned});
      }
      for (int i = 1; i < cfg_.peripheral_depth; ++i) {
        out.push_back({LayerKind::conv3x3, aligned, aligned});
        out.push_back({LayerKind::relu});
      }
      out.push_back({LayerKind::conv3x3, aligned, p.channels});
    }
    port.peripheral_in = Network(base + ".in", in, mix_seed(cfg_.seed, 2 * p.task_id + 1));
    port.peripheral_out = Network(base + ".out", out, mix_seed(cfg_.seed, 2 * p.task_id + 2));
    concat += aligned;
    ports_.push_back(std::move(port));
  }
  std::vector<LayerDesc> an, syn;
  if (cfg_.analysis_downs == 0) {
    cfg_.latent_channels = concat;
  } else {
    const int lc = cfg_.latent_channels;
    for (int i = 0; i < cfg_.analysis_downs; ++i) {
      if (i > 0) an.push_back({LayerKind::relu});
      an.push_back({LayerKind::conv3x3_s2, i == 0 ? concat : lc, lc});
    }
    for (int i = 0; i < cfg_.analysis_downs; ++i) {
      if (i > 0) syn.push_back({LayerKind::relu});
      syn.push_back({LayerKind::deconv2, lc, i + 1 == cfg_.analysis_downs ? concat : lc});
    }
  }
  analysis_ = Network("analysis", an, mix_seed(cfg_.seed, 1001));
  synthesis_ = Network("synthesis", syn, mix_seed(cfg_.seed, 1002));
  prior_ = make_prior(cfg_);
}

AggregateCodec::AggregateCodec(const AggregateCodec& o)
    : cfg_(o.cfg_), ports_(o.ports_), analysis_(o.analysis_), synthesis_(o.synthesis_), prior_(o.prior_->clone()) {}

AggregateCodec& AggregateCodec::operator=(const AggregateCodec& o) {
  if (this != &o) {
    cfg_ = o.cfg_;
    ports_ = o.ports_;
    analysis_ = o.analysis_;
    synthesis_ = o.synthesis_;
    prior_ = o.prior_->clone();
  }
  return *this;
}

Shape AggregateCodec::latent_shape() const {
  int concat = 0;
  for (const auto& p : ports_) concat += p.peripheral_in.layers().empty() ? p.spec.channels : cfg_.port_channels;
  const Shape s = analysis_.output_shape({1, concat, ports_[0].spec.height, ports_[0].spec.width});
  return {s[1], s[2], s[3]};
}

std::vector<Parameter*> AggregateCodec::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : ports_) {
    for (Network* n : {&p.peripheral_in, &p.peripheral_out}) {
      for (Parameter& q : n->parameters()) out.push_back(&q);
    }
  }
  for (Network* n : {&analysis_, &synthesis_}) {
    for (Parameter& q : n->parameters()) out.push_back(&q);
  }
  for (Parameter* q : prior_->parameters()) out.push_back(q);
  return out;
}

void AggregateCodec::set_frozen(bool frozen) {
  auto apply = [frozen](Network& n) {
    if (frozen) {
      n.freeze();
    } else {
      n.unfreeze();
    }
  };
  for (auto& p : ports_) {
    apply(p.peripheral_in);
    apply(p.peripheral_out);
  }
  apply(analysis_);
  apply(synthesis_);
  prior_->set_frozen(frozen);
}

void AggregateCodec::check_features(const std::vector<Shape>& shapes) const {
  if (shapes.size() != ports_.size()) {
    throw ShapeError("expected " + std::to_string(ports_.size()) + " task features, got " +
                     std::to_string(shapes.size()));
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const PortSpec& p = ports_[i].spec;
    const Shape& s = shapes[i];
    if (s.size() != 4 || s[1] != p.channels || s[2] != p.height || s[3] != p.width) {
      throw ShapeError("feature for task " + std::to_string(p.task_id) + " has shape " + shape_str(s) +
                       ", registered (N," + std::to_string(p.channels) + "," + std::to_string(p.height) + "," +
                       std::to_string(p.width) + ")");
    }
  }
}

Var AggregateCodec::analyze(Graph& g, const std::vector<Var>& features) {
  std::vector<Shape> shapes;
  for (const Var& f : features) shapes.push_back(f.shape());
  check_features(shapes);
  std::vector<Var> aligned;
  for (std::size_t i = 0; i < features.size(); ++i) aligned.push_back(ports_[i].peripheral_in.apply(g, features[i]));
  Var x = aligned.size() == 1 ? aligned[0] : ops::concat_channels(aligned);
  return analysis_.apply(g, x);
}

std::vector<Var> AggregateCodec::synthesize(Graph& g, Var z_hat) {
  const Shape ls = latent_shape();
  const Shape zs = z_hat.shape();
  if (zs.size() != 4 || zs[1] != ls[0] || zs[2] != ls[1] || zs[3] != ls[2]) {
    throw ShapeError("latent " + shape_str(zs) + " does not match codec latent extents (N," + std::to_string(ls[0]) +
                     "," + std::to_string(ls[1]) + "," + std::to_string(ls[2]) + ")");
  }
  Var x = synthesis_.apply(g, z_hat);
  const int h = ports_[0].spec.height, w = ports_[0].spec.width;
  if (x.shape()[2] != h || x.shape()[3] != w) x = ops::resample_bilinear(x, h, w);
  std::vector<Var> out;
  int offset = 0;
  for (auto& p : ports_) {
    const int c = p.peripheral_in.layers().empty() ? p.spec.channels : cfg_.port_channels;
    Var part = ports_.size() == 1 ? x : ops::slice_channels(x, offset, c);
    offset += c;
    out.push_back(p.peripheral_out.apply(g, part));
  }
  return out;
}

Tensor AggregateCodec::aggregate_analyze(const std::vector<Tensor>& features) {
  Graph g(false);
  std::vector<Var> vars;
  for (const Tensor& f : features) vars.push_back(g.constant(as_batched(f)));
  return analyze(g, vars).value();
}

std::vector<Tensor> AggregateCodec::aggregate_synthesize(const Tensor& z_hat) {
  Graph g(false);
  std::vector<Tensor> out;
  for (const Var& v : synthesize(g, g.constant(as_batched(z_hat)))) out.push_back(v.value());
  return out;
}

std::vector<CdfTable> AggregateCodec::side_tables(const Shape& side_shape) {
  const Tensor scales = prior_->side_scales(side_shape);
  std::vector<CdfTable> tables;
  tables.reserve(scales.numel());
  for (double s : scales.values()) tables.push_back(build_cdf(0.0, s, cfg_.quant, cfg_.precision));
  return tables;
}

std::vector<CdfTable> AggregateCodec::latent_tables(const SymbolGrid& side, const Shape& z_shape,
                                                    EntropyParams* params_out) {
  EntropyParams p = prior_->predict(side.to_tensor(), z_shape);
  std::vector<CdfTable> tables;
  tables.reserve(p.mu.numel());
  for (std::size_t i = 0; i < p.mu.numel(); ++i) {
    tables.push_back(build_cdf(p.mu[i], p.sigma[i], cfg_.quant, cfg_.precision));
  }
  if (params_out != nullptr) *params_out = std::move(p);
  return tables;
}

CompressResult AggregateCodec::compress(const std::vector<Tensor>& features, int source_h, int source_w) {
  std::vector<Tensor> batched;
  for (const Tensor& f : features) {
    batched.push_back(as_batched(f));
    if (batched.back().dim(0) != 1) throw ShapeError("compress takes one item per stream");
  }
  CompressResult r;
  const Tensor z = aggregate_analyze(batched);
  r.latent_symbols = quantize(z, cfg_.quant);
  const Tensor z_hat = r.latent_symbols.to_tensor();
  r.side_symbols = quantize(prior_->analyze(z_hat), cfg_.quant);
  const auto stables = side_tables(r.side_symbols.shape);
  const auto ztables = latent_tables(r.side_symbols, r.latent_symbols.shape, &r.latent_params);

  const Tensor side_sigma = prior_->side_scales(r.side_symbols.shape);
  r.estimated_side_bits =
      rate_estimate(r.side_symbols, {Tensor(r.side_symbols.shape, 0.0), side_sigma}, cfg_.quant);
  r.estimated_latent_bits = rate_estimate(r.latent_symbols, r.latent_params, cfg_.quant);

  ContainerStream& s = r.stream;
  s.side = encode_symbols(r.side_symbols.symbols, stables);
  s.latent_payload = encode_symbols(r.latent_symbols.symbols, ztables);
  for (const auto& p : ports_) s.task_ids.push_back(static_cast<std::uint16_t>(p.spec.task_id));
  for (int i = 0; i < 3; ++i) s.latent[i] = checked_u16(r.latent_symbols.shape[static_cast<std::size_t>(i) + 1], "latent extent");
  s.source[0] = checked_u16(source_h, "source height");
  s.source[1] = checked_u16(source_w, "source width");
  s.digest = digest();
  r.reconstruction = aggregate_synthesize(z_hat);
  return r;
}

DecompressResult AggregateCodec::decompress(const ContainerStream& s) {
  if (s.version != kContainerVersion) throw VersionError("container version " + std::to_string(s.version));
  if (s.digest != digest()) {
    throw DigestError("stream was produced by model " + to_hex(s.digest).substr(0, 16) + "..., loaded model is " +
                      to_hex(digest()).substr(0, 16) + "...");
  }
  if (s.task_ids.size() != ports_.size()) throw CorruptionError("task set in stream does not match the codec ports");
  for (std::size_t i = 0; i < ports_.size(); ++i) {
    if (s.task_ids[i] != ports_[i].spec.task_id) throw CorruptionError("task order in stream does not match the codec");
  }
  const Shape ls = latent_shape();
  if (s.latent[0] != ls[0] || s.latent[1] != ls[1] || s.latent[2] != ls[2]) {
    throw CorruptionError("latent extents in stream do not match the codec");
  }
  const Shape z_shape{1, ls[0], ls[1], ls[2]};
  const Shape side_shape = prior_->analyze(Tensor(z_shape, 0.0)).shape();
  DecompressResult r;
  const auto stables = side_tables(side_shape);
  r.side_symbols.shape = side_shape;
  r.side_symbols.symbols = decode_symbols(s.side, stables, stables.size());
  const auto ztables = latent_tables(r.side_symbols, z_shape, &r.latent_params);
  r.latent_symbols.shape = z_shape;
  r.latent_symbols.symbols = decode_symbols(s.latent_payload, ztables, ztables.size());
  r.features = aggregate_synthesize(r.latent_symbols.to_tensor());
  return r;
}

NamedArrays AggregateCodec::parameter_arrays() {
  NamedArrays out;
  std::vector<Parameter*> own;
  for (auto& p : ports_) {
    for (Network* n : {&p.peripheral_in, &p.peripheral_out}) {
      for (Parameter& q : n->parameters()) own.push_back(&q);
    }
  }
  for (Network* n : {&analysis_, &synthesis_}) {
    for (Parameter& q : n->parameters()) own.push_back(&q);
  }
  append_arrays(out, own);
  append_arrays(out, prior_->parameters(), "prior.");
  return out;
}

Digest AggregateCodec::digest() { return sha256(serialize_arrays("TCKM", parameter_arrays())); }

Bytes AggregateCodec::serialize() {
  NamedArrays arrays = parameter_arrays();
  arrays.emplace_back("meta.format", Tensor({1}, static_cast<double>(kCodecFormat)));
  Tensor ports({static_cast<int>(ports_.size()), 4});
  for (std::size_t i = 0; i < ports_.size(); ++i) {
    const PortSpec& p = ports_[i].spec;
    ports[4 * i] = p.task_id;
    ports[4 * i + 1] = p.channels;
    ports[4 * i + 2] = p.height;
    ports[4 * i + 3] = p.width;
  }
  arrays.emplace_back("meta.ports", ports);
  const auto& cb = cfg_.codebook;
  const auto& sp = cfg_.spatial;
  const std::vector<double> conf{static_cast<double>(cfg_.port_channels),
                                 static_cast<double>(cfg_.peripheral_depth),
                                 static_cast<double>(cfg_.latent_channels),
                                 static_cast<double>(cfg_.analysis_downs),
                                 cfg_.prior == PriorKind::codebook ? 0.0 : 1.0,
                                 static_cast<double>(cb.m),
                                 static_cast<double>(cb.n),
                                 static_cast<double>(cb.tau),
                                 static_cast<double>(cb.hc),
                                 static_cast<double>(cb.wc),
                                 static_cast<double>(cb.coeff_hidden),
                                 static_cast<double>(cb.predictor_width),
                                 static_cast<double>(cb.hyper_downs),
                                 static_cast<double>(sp.side_channels),
                                 static_cast<double>(sp.width),
                                 static_cast<double>(cfg_.quant.t_min),
                                 static_cast<double>(cfg_.quant.t_max),
                                 static_cast<double>(cfg_.precision)};
  arrays.emplace_back("meta.config", Tensor({static_cast<int>(conf.size())}, conf));
  const Digest d = digest();
  Tensor dt({32});
  for (int i = 0; i < 32; ++i) dt[static_cast<std::size_t>(i)] = d[static_cast<std::size_t>(i)];
  arrays.emplace_back("meta.digest", dt);
  return serialize_arrays("TCKM", arrays);
}

AggregateCodec AggregateCodec::deserialize(std::span<const std::uint8_t> bytes) {
  const NamedArrays arrays = parse_arrays(bytes, "TCKM");
  const int format = static_cast<int>(find_array(arrays, "meta.format")[0]);
  if (format != kCodecFormat) {
    throw VersionError("codec format " + std::to_string(format) + " not supported (expected " +
                       std::to_string(kCodecFormat) + ")");
  }
  const Tensor& pt = find_array(arrays, "meta.ports");
  if (pt.rank() != 2 || pt.dim(1) != 4) throw CorruptionError("malformed meta.ports");
  std::vector<PortSpec> ports;
  for (int i = 0; i < pt.dim(0); ++i) {
    const std::size_t b = 4 * static_cast<std::size_t>(i);
    ports.push_back({static_cast<int>(pt[b]), static_cast<int>(pt[b + 1]), static_cast<int>(pt[b + 2]),
                     static_cast<int>(pt[b + 3])});
  }
  const Tensor& ct = find_array(arrays, "meta.config");
  if (ct.numel() != 18) throw CorruptionError("malformed meta.config");
  auto at = [&](std::size_t i) { return static_cast<int>(ct[i]); };
  CodecConfig cfg;
  cfg.port_channels = at(0);
  cfg.peripheral_depth = at(1);
  cfg.latent_channels = at(2);
  cfg.analysis_downs = at(3);
  cfg.prior = at(4) == 0 ? PriorKind::codebook : PriorKind::spatial;
  cfg.codebook.m = at(5);
  cfg.codebook.n = at(6);
  cfg.codebook.tau = at(7);
  cfg.codebook.hc = at(8);
  cfg.codebook.wc = at(9);
  cfg.codebook.coeff_hidden = at(10);
  cfg.codebook.predictor_width = at(11);
  cfg.codebook.hyper_downs = at(12);
  cfg.spatial.side_channels = at(13);
  cfg.spatial.width = at(14);
  cfg.quant.t_min = at(15);
  cfg.quant.t_max = at(16);
  cfg.precision = at(17);
  AggregateCodec codec(ports, cfg);
  std::vector<Parameter*> own;
  for (auto& p : codec.ports_) {
    for (Network* n : {&p.peripheral_in, &p.peripheral_out}) {
      for (Parameter& q : n->parameters()) own.push_back(&q);
    }
  }
  for (Network* n : {&codec.analysis_, &codec.synthesis_}) {
    for (Parameter& q : n->parameters()) own.push_back(&q);
  }
  assign_arrays(own, arrays);
  assign_arrays(codec.prior_->parameters(), arrays, "prior.");
  const Tensor& dt = find_array(arrays, "meta.digest");
  if (dt.numel() != 32) throw CorruptionError("malformed meta.digest");
  Digest stored{};
  for (int i = 0; i < 32; ++i) stored[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(dt[static_cast<std::size_t>(i)]);
  if (stored != codec.digest()) throw DigestError("model file digest does not match its parameters");
  return codec;
}

void AggregateCodec::save(const std::filesystem::path& path) { write_file_atomic(path, serialize()); }

AggregateCodec AggregateCodec::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

Bytes serialize_feature_file(const FeatureFile& f) {
  if (f.task_ids.size() != f.features.size()) throw ShapeError("feature file needs one task id per feature");
  NamedArrays arrays;
  for (std::size_t i = 0; i < f.features.size(); ++i) {
    arrays.emplace_back("task." + std::to_string(f.task_ids[i]), f.features[i]);
  }
  arrays.emplace_back("source", Tensor({2}, std::vector<double>{static_cast<double>(f.source_h),
                                                                 static_cast<double>(f.source_w)}));
  return serialize_arrays("TCKF", arrays);
}

void write_feature_file(const std::filesystem::path& path, const FeatureFile& f) {
  write_file_atomic(path, serialize_feature_file(f));
}

FeatureFile read_feature_file(const std::filesystem::path& path) {
  const NamedArrays arrays = read_arrays(path, "TCKF");
  FeatureFile f;
  for (const auto& [name, t] : arrays) {
    if (name == "source") {
      if (t.numel() != 2) throw CorruptionError("malformed source extents in feature file");
      f.source_h = static_cast<int>(t[0]);
      f.source_w = static_cast<int>(t[1]);
    } else if (name.starts_with("task.")) {
      f.task_ids.push_back(std::stoi(name.substr(5)));
      f.features.push_back(t);
    } else {
      throw CorruptionError("unexpected array \"" + name + "\" in feature file");
    }
  }
  if (f.features.empty()) throw CorruptionError("feature file holds no task features");
  return f;
}

}  // namespace tck
