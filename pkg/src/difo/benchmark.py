"""The toy benchmark wired end to end: shifted data, source model, toy ViL and baselines.

One integer seed drives every stage, so ``build_benchmark(seed)`` is a pure
function of its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .adaptation import AdaptationConfig, AdaptResult, adapt
from .data import DomainDataset, ShiftSpec, ShiftWorld, generate_shift_pair
from .evaluation import accuracy, train_oracle, weight_sweep, zero_shot_accuracy
from .target import PretrainResult, SourceConfig, forward, predict, pretrain_source
from .vil import PromptContext, ToyViLConfig, ToyViLModel, build_toy_vil


@dataclass
class ToyBenchmark:
    seed: int
    source: DomainDataset
    target: DomainDataset
    world: ShiftWorld
    pretrained: PretrainResult
    vil: ToyViLModel
    prompt: PromptContext

    @property
    def source_model(self):
        return self.pretrained.model

    def source_accuracy(self) -> float:
        """Source-only accuracy on the target domain."""
        return accuracy(predict(self.source_model, self.target.inputs), self.target.labels)

    def zero_shot_accuracy(self) -> float:
        return zero_shot_accuracy(self.vil, self.prompt, self.target)

    def sweep(self, grid=None):
        return weight_sweep(self.source_model, self.vil, self.prompt, self.target, grid)

    def oracle_logits(self, config: SourceConfig | None = None):
        oracle = train_oracle(self.target, config or SourceConfig(seed=self.seed))
        return forward(oracle, self.target.inputs).numpy()

    def adapt(self, config: AdaptationConfig | None = None, **kwargs) -> AdaptResult:
        config = config or AdaptationConfig(seed=self.seed)
        return adapt(self.source_model, self.vil, self.target.inputs, config, prompt=self.prompt,
                     labels=self.target.labels, **kwargs)


def build_benchmark(seed: int = 0, spec: ShiftSpec | None = None, vil_config: ToyViLConfig | None = None,
                    source_config: SourceConfig | None = None) -> ToyBenchmark:
    spec = replace(spec or ShiftSpec(), seed=seed)
    source, target, world = generate_shift_pair(spec)
    pretrained = pretrain_source(source, replace(source_config or SourceConfig(), seed=seed))
    vil = build_toy_vil(world, replace(vil_config or ToyViLConfig(), seed=seed))
    return ToyBenchmark(seed, source, target, world, pretrained, vil, vil.init_prompt(seed=seed))
