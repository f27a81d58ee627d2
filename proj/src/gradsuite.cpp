#include "plmix/gradsuite.hpp"

#include <functional>
#include <map>

#include "plmix/errors.hpp"
#include "plmix/losses.hpp"
#include "plmix/model.hpp"

namespace plmix {

namespace {

Tensor2 random(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor2 t(r, c);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

double dot(const Tensor2& a, const Tensor2& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.values()[i] * b.values()[i];
  return s;
}

void add_grad(Tensor2& g, const Tensor2& d) { add_inplace(g, d); }

ModelConfig small_model() {
  ModelConfig c;
  c.hidden = 6;
  c.frame_dim = 4;
  c.ssl_dim = 5;
  c.ssl_layers = 3;
  c.position_scale = 3.0;
  return c;
}

LayeredFeatures random_features(std::size_t frames, const ModelConfig& c, Rng& rng) {
  LayeredFeatures f;
  for (int k = 0; k < c.ssl_layers; ++k) f.layers.push_back(random(frames, c.ssl_dim, rng));
  return f;
}

void randomize_model(SynthModel& m, Rng& rng) {
  for (auto& p : m.params().all())
    for (double& v : p.value.values()) v = 0.5 * rng.normal();
}

void freeze_all_but(ParamStore& s, std::initializer_list<std::string> keep) {
  for (const auto& p : s.all()) s.set_frozen(p.group, true);
  for (const auto& g : keep) s.set_frozen(g, false);
}

GradCheckResult check_affine(Rng& rng) {
  ParamStore s;
  s.add("x", "g", random(3, 4, rng));
  s.add("W", "g", random(4, 5, rng));
  s.add("b", "g", random(1, 5, rng));
  const Tensor2 R = random(3, 5, rng);
  return grad_check([&](ParamStore& st, bool acc) {
    const Tensor2 y = affine_forward(st[0].value, st[1].value, st[2].value);
    if (acc) {
      Tensor2 dx;
      affine_backward(st[0].value, st[1].value, R, &dx, st[1].grad, st[2].grad.values());
      add_grad(st[0].grad, dx);
    }
    return dot(y, R);
  }, s);
}

GradCheckResult check_block(Rng& rng) {
  ParamStore s;
  s.add("x", "g", random(3, 4, rng));
  s.add("W", "g", random(4, 4, rng, 0.5));
  s.add("b", "g", random(1, 4, rng));
  const Tensor2 R = random(3, 4, rng);
  return grad_check([&](ParamStore& st, bool acc) {
    BlockCache cache;
    const Tensor2 y = block_forward(st[0].value, st[1].value, st[2].value, &cache);
    if (acc) add_grad(st[0].grad, block_backward(cache, st[1].value, R, st[1].grad, st[2].grad));
    return dot(y, R);
  }, s);
}

GradCheckResult check_segment_mean(Rng& rng) {
  ParamStore s;
  s.add("x", "g", random(7, 3, rng));
  const std::vector<std::size_t> bounds = {2, 5, 7};
  const Tensor2 R = random(3, 3, rng);
  return grad_check([&](ParamStore& st, bool acc) {
    const Tensor2 y = segment_mean(st[0].value, bounds);
    if (acc) add_grad(st[0].grad, segment_mean_backward(R, bounds, 7));
    return dot(y, R);
  }, s);
}

GradCheckResult check_upsample(Rng& rng) {
  ParamStore s;
  s.add("x", "g", random(3, 3, rng));
  const std::vector<int> durations = {2, 1, 3};
  const Tensor2 R = random(6, 3, rng);
  return grad_check([&](ParamStore& st, bool acc) {
    const Tensor2 y = upsample(st[0].value, durations);
    if (acc) add_grad(st[0].grad, upsample_backward(R, durations));
    return dot(y, R);
  }, s);
}

GradCheckResult check_masked_mse(Rng& rng) {
  ParamStore s;
  s.add("pred", "g", random(5, 3, rng));
  const Tensor2 target = random(5, 3, rng);
  const std::vector<double> mask = {1, 0, 1, 1, 0};
  return grad_check([&](ParamStore& st, bool acc) {
    const auto l = masked_mse(st[0].value, target, mask, 7.0);
    if (acc) add_grad(st[0].grad, l.grad);
    return l.value;
  }, s);
}

GradCheckResult check_cross_entropy(Rng& rng) {
  ParamStore s;
  s.add("logits", "g", random(5, 4, rng));
  const std::vector<int> labels = {0, 3, 1, 1, 2};
  const std::vector<double> mask = {1, 1, 0, 1, 1};
  return grad_check([&](ParamStore& st, bool acc) {
    const auto l = cross_entropy(st[0].value, labels, mask);
    if (acc) add_grad(st[0].grad, l.grad);
    return l.value;
  }, s);
}

GradCheckResult check_duration_loss(Rng& rng) {
  ParamStore s;
  s.add("log_d", "g", random(4, 1, rng));
  const std::vector<int> durations = {1, 3, 2, 6};
  const std::vector<double> mask = {1, 1, 0, 1};
  return grad_check([&](ParamStore& st, bool acc) {
    const auto l = duration_loss(st[0].value, durations, mask);
    if (acc) add_grad(st[0].grad, l.grad);
    return l.value;
  }, s);
}

GradCheckResult check_phoneme_encoder(Rng& rng) {
  SynthModel m(small_model(), rng.next_u64());
  m.init_embedding(1, 5, rng);
  randomize_model(m, rng);
  freeze_all_but(m.params(), {group::kPhonemeEncoder, group::embedding(1)});
  const std::vector<int> ids = {kPhonemeIdStride + 0, kPhonemeIdStride + 3, kPhonemeIdStride + 3, kPhonemeIdStride + 1};
  const Tensor2 R = random(ids.size(), 6, rng);
  return grad_check([&](ParamStore&, bool acc) {
    const auto enc = phn_encode(m, 1, ids);
    if (acc) phn_encode_backward(m, enc, R);
    return dot(enc.output, R);
  }, m.params());
}

GradCheckResult check_representation_encoder(Rng& rng) {
  SynthModel m(small_model(), rng.next_u64());
  randomize_model(m, rng);
  freeze_all_but(m.params(), {group::kRepresentationEncoder});
  const auto feats = random_features(9, m.config(), rng);
  const std::vector<std::size_t> bounds = {3, 4, 9};
  const Tensor2 R = random(3, 6, rng);
  return grad_check([&](ParamStore&, bool acc) {
    const auto enc = rep_encode(m, feats, bounds);
    if (acc) rep_encode_backward(m, enc, R);
    return dot(enc.output, R);
  }, m.params());
}

GradCheckResult check_synthesis(Rng& rng) {
  SynthModel m(small_model(), rng.next_u64());
  randomize_model(m, rng);
  freeze_all_but(m.params(), {group::kSharedEncoder, group::kDurationPredictor, group::kDecoder, "input"});
  const std::size_t ci = m.params().add("input/c", "input", random(3, 6, rng));
  const std::vector<int> durations = {2, 1, 3};
  const Tensor2 Rf = random(6, 4, rng);
  const Tensor2 Rd = random(3, 1, rng);
  return grad_check([&](ParamStore& st, bool acc) {
    const auto pass = synthesize(m, st[ci].value, durations);
    if (acc) add_grad(st[ci].grad, synthesize_backward(m, pass, Rf, Rd));
    return dot(pass.frames, Rf) + dot(pass.log_duration, Rd);
  }, m.params());
}

GradCheckResult check_composed(Rng& rng) {
  SynthModel m(small_model(), rng.next_u64());
  m.init_embedding(1, 4, rng);
  randomize_model(m, rng);
  for (const auto& p : m.params().all()) m.params().set_frozen(p.group, false);
  const int L = 4;
  std::vector<int> ids, durations;
  for (int i = 0; i < L; ++i) {
    ids.push_back(kPhonemeIdStride + static_cast<int>(rng.uniform_int(0, 3)));
    durations.push_back(static_cast<int>(rng.uniform_int(1, 3)));
  }
  int frames = 0;
  for (int d : durations) frames += d;
  const Tensor2 target = random(static_cast<std::size_t>(frames), 4, rng);
  const auto feats = random_features(static_cast<std::size_t>(frames), m.config(), rng);
  // Mixed sources so both encoders and every downstream block are on the path.
  const std::vector<Source> choice = {Source::FromPhn, Source::FromRepr, Source::FromPhn, Source::FromRepr};
  std::vector<double> frame_mask(static_cast<std::size_t>(frames), 1.0);
  frame_mask[1] = 0.0;
  const std::vector<double> duration_mask = {1, 1, 0, 1};
  return grad_check([&](ParamStore&, bool acc) {
    Example ex;
    ex.language = 1;
    ex.phonemes = ids;
    ex.durations = durations;
    ex.target = &target;
    ex.features = &feats;
    ex.branch = Branch::Phoneme;
    ex.choice = choice;
    ex.frame_mask = frame_mask;
    ex.duration_mask = duration_mask;
    return forward_loss(m, ex, {}, acc).total();
  }, m.params());
}

const std::vector<std::pair<std::string, std::function<GradCheckResult(Rng&)>>>& registry() {
  static const std::vector<std::pair<std::string, std::function<GradCheckResult(Rng&)>>> r = {
      {"affine", check_affine},
      {"residual_block", check_block},
      {"segment_mean", check_segment_mean},
      {"upsample", check_upsample},
      {"masked_mse", check_masked_mse},
      {"cross_entropy", check_cross_entropy},
      {"duration_loss", check_duration_loss},
      {"phoneme_encoder", check_phoneme_encoder},
      {"representation_encoder", check_representation_encoder},
      {"synthesis", check_synthesis},
  };
  return r;
}

}  // namespace

std::vector<std::string> grad_case_names() {
  std::vector<std::string> out;
  for (const auto& [name, fn] : registry()) out.push_back(name);
  out.push_back("composed");
  return out;
}

GradCase run_grad_case(const std::string& name, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x67726164ULL}));
  if (name == "composed") return {name, kComposedTolerance, check_composed(rng)};
  for (const auto& [n, fn] : registry())
    if (n == name) return {name, kLayerTolerance, fn(rng)};
  throw ArgumentError("unknown grad-check case '" + name + "'");
}

std::vector<GradCase> run_grad_suite(std::uint64_t seed, int composed_seeds) {
  std::vector<GradCase> out;
  for (const auto& [name, fn] : registry()) out.push_back(run_grad_case(name, seed));
  for (int i = 0; i < composed_seeds; ++i) {
    auto c = run_grad_case("composed", seed + static_cast<std::uint64_t>(i));
    c.name += "/seed=" + std::to_string(seed + static_cast<std::uint64_t>(i));
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace plmix
