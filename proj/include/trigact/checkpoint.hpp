#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "trigact/io.hpp"
#include "trigact/models.hpp"
#include "trigact/trigger.hpp"
#include "trigact/triggered_model.hpp"

namespace trigact {

/// Everything needed to rebuild a trained model.
template <typename T>
struct Checkpoint {
  Classifier<T> model;
  std::optional<Trigger<T>> trigger;
  bool clip_triggered = false;
  nlohmann::json metadata = nlohmann::json::object();  // seed, schedule, procedure, ...
  std::string fingerprint;

  Container to_container() const {
    Container c;
    c.put_text("arch_id", model.arch_id());
    const Shape& in = model.input_shape();
    c.put_vector("shape", std::vector<std::int32_t>{std::int32_t(model.class_count()), std::int32_t(in.c),
                                                    std::int32_t(in.h), std::int32_t(in.w)});
    for (const auto* p : model.parameters()) c.put_tensor("param/" + p->name, p->value);
    for (const auto* b : model.buffers()) c.put_tensor("buffer/" + b->name, b->value);
    c.put_text("metadata", metadata.dump());
    c.put_text("fingerprint", fingerprint);
    if (trigger) {
      c.put_tensor("trigger/values", trigger->values);
      nlohmann::json t = {{"mode", trigger_mode_name(trigger->mode)},
                          {"eps_t", trigger->eps_t},
                          {"step_alpha", trigger->step_alpha},
                          {"seed", trigger->seed},
                          {"update_count", trigger->update_count},
                          {"clip_triggered", clip_triggered}};
      c.put_text("trigger/meta", t.dump());
    }
    return c;
  }

  static Checkpoint from_container(const Container& c) {
    const auto shape = c.get_vector<std::int32_t>("shape");
    if (shape.size() != 4) throw IngestionError("checkpoint: malformed shape entry");
    Classifier<T> model = build_model<T>(c.get_text("arch_id"), std::size_t(shape[0]), 0,
                                         Shape{1, std::size_t(shape[1]), std::size_t(shape[2]), std::size_t(shape[3])});
    for (auto* p : model.parameters()) assign(p, c.get_tensor<T>("param/" + p->name));
    for (auto* b : model.buffers()) assign(b, c.get_tensor<T>("buffer/" + b->name));
    Checkpoint ck{std::move(model), std::nullopt, false, nlohmann::json::parse(c.get_text("metadata")),
                  c.get_text("fingerprint")};
    if (c.has("trigger/values")) {
      const auto t = nlohmann::json::parse(c.get_text("trigger/meta"));
      ck.trigger = Trigger<T>{c.get_tensor<T>("trigger/values"), parse_trigger_mode(t.at("mode")), t.at("eps_t"),
                              t.at("step_alpha"), t.at("seed"), t.at("update_count")};
      ck.clip_triggered = t.at("clip_triggered");
    }
    return ck;
  }

  void save(const std::filesystem::path& path) const { to_container().save(path); }
  static Checkpoint load(const std::filesystem::path& path) { return from_container(Container::load(path)); }

  TriggeredModel<T> triggered() const {
    if (!trigger) throw ContractError("checkpoint of " + model.arch_id() + " has no trigger");
    return {model, *trigger, clip_triggered};
  }

 private:
  static void assign(NamedTensor<T>* dst, Tensor<T> v) {
    if (!(v.shape() == dst->value.shape())) throw IngestionError("checkpoint: shape mismatch for " + dst->name);
    dst->value = std::move(v);
  }
};

/// Raw trigger export plus a PPM rendering amplified x10 around mid-grey.
template <typename T>
void export_trigger(const Trigger<T>& trig, const std::filesystem::path& stem) {
  Container c;
  c.put_tensor("values", trig.values);
  c.put_text("mode", trigger_mode_name(trig.mode));
  c.save(stem.string() + ".tac");
  const Shape& s = trig.shape();
  std::string ppm = "P6\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n255\n";
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = 0.5 + 10.0 * double(trig.values.at(0, std::min(ch, s.c - 1), y, x));
        ppm.push_back(char(std::uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
      }
  std::ofstream out(stem.string() + ".ppm", std::ios::binary);
  out << ppm;
}

}  // namespace trigact
