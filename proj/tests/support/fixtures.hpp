/**
 * Copyright 2026 The fedinfer Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef FEDINFER_TESTS_FIXTURES_HPP_
#define FEDINFER_TESTS_FIXTURES_HPP_

#include <cstring>
#include <memory>
#include <vector>

#include "fedinfer/datakit.hpp"
#include "fedinfer/model_zoo.hpp"

namespace fixture {

using namespace fedinfer;

// Narrow layers keep federation tests fast; the wiring is the same as the default architecture.
inline zoo::ArchConfig small_arch() {
  zoo::ArchConfig a;
  a.head_dim = 24;
  a.tail_hidden = 32;
  a.ce_hidden = 32;
  a.co_hidden = 32;
  a.embed_dim = 16;
  return a;
}

struct SmallSystem {
  data::SyntheticTask task;
  std::shared_ptr<const data::FeatureTable> raw;
  data::HoldoutSplit split;
  std::vector<zoo::DeviceState> devices;
};

inline SmallSystem make_small_system(std::size_t num_devices = 3, std::uint64_t seed = 7,
                                     const zoo::ArchConfig &arch = small_arch(), std::size_t per_class = 60) {
  data::SyntheticTaskConfig synth;
  synth.num_classes = 4;
  synth.input_dim = 12;
  synth.train_per_class = per_class;
  synth.test_per_class = 20;
  synth.seed = seed;
  SmallSystem s;
  s.task = data::synth_generate(synth);
  s.raw = std::make_shared<const data::FeatureTable>(s.task.inputs);
  s.split = data::holdout_shared(s.task.train, 0.25, seed);
  std::vector<data::Dataset> local{s.split.local_pool};
  if (num_devices > 1) local = data::partition_dirichlet(s.split.local_pool, 1.0, num_devices, seed).devices;
  for (std::size_t k = 0; k < num_devices; ++k) {
    s.devices.push_back(zoo::make_device(k, zoo::HeadSource::synthetic(s.raw, arch.head_dim, seed * 31 + k),
                                         synth.num_classes, local[k], arch, seed * 17 + k));
  }
  return s;
}

inline bool bit_equal(const Matrix &a, const Matrix &b) {
  return a.same_shape(b) && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

// Every parameter of `a` equals the same-named parameter of `b`, bit for bit.
inline bool same_parameters(const nn::Layer &a, const nn::Layer &b) {
  std::vector<Matrix> va, vb;
  a.for_each_parameter([&](const std::string &, const nn::Parameter &p) { va.push_back(p.value); });
  b.for_each_parameter([&](const std::string &, const nn::Parameter &p) { vb.push_back(p.value); });
  if (va.size() != vb.size()) return false;
  for (std::size_t i = 0; i < va.size(); ++i) {
    if (!bit_equal(va[i], vb[i])) return false;
  }
  return true;
}

}  // namespace fixture

#endif  // FEDINFER_TESTS_FIXTURES_HPP_
