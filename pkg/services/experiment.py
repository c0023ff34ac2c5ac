"""
Experiment Service

Runs the experiment steps behind the command line: dataset generation,
surrogate attention training, policy comparison, single-frame inspection
and the query/key size ablation. Every step is deterministic given the
experiment configuration and its seeds.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config.constants import PATHS, SPLIT_RATIOS, UNITS, PolicyName
from models.scene import DatasetManifest, DatasetStore, SceneFrame
from models.tensors import PseudoImage
from services.attention_comm import (
    AttentionState, AttentionTrainer, TrainingExample, TrainingResult, selection_accuracy
)
from services.base import BaseService
from services.evaluation import EvaluationReport, PolicyEvaluation, evaluate_frames
from services.netsim import (
    FeaturePayload, FrameResult, LinkModel, NetworkSimulator, Policy, ProtocolMessage,
    QueryBroadcast, policy_from_name, write_trace
)
from services.pillars import PillarEncoder, PillarGrid, SPointNetWeights
from services.scenegen import SceneGenerator, oracle_detect
from utils.common import derive_seed
from utils.decorators import log_execution_time
from utils.errors import DatasetError

SPLIT_STREAM = 0x5B117
ABLATION_QUERY_SIZES = (4, 8, 16, 32)
ABLATION_KEY_SIZES = (32, 64, 128, 256)


def split_frames(frame_ids: Sequence[int], seed: int) -> Dict[str, List[int]]:
    """
    Shuffle frames and cut them train:val:test at 6:2:2.

    Train and val sizes are floored; test takes the remainder.
    """
    ids = np.array(sorted(frame_ids), dtype=np.int64)
    order = np.random.default_rng(derive_seed(seed, SPLIT_STREAM)).permutation(len(ids))
    shuffled = ids[order]
    total = sum(SPLIT_RATIOS.values())
    n_train = len(ids) * SPLIT_RATIOS['train'] // total
    n_val = len(ids) * SPLIT_RATIOS['val'] // total
    return {
        'train': sorted(int(i) for i in shuffled[:n_train]),
        'val': sorted(int(i) for i in shuffled[n_train:n_train + n_val]),
        'test': sorted(int(i) for i in shuffled[n_train + n_val:]),
    }


@dataclass
class FrameSummary:
    """Channel means of a frame's pseudo-images, enough to rebuild any query or key."""
    frame_id: int
    vehicle: PseudoImage
    infrastructures: List[PseudoImage]
    oracle_best: Optional[int]

    def example(self, state: AttentionState) -> TrainingExample:
        query = state.encode_query(self.vehicle)
        keys = [state.encode_key(image).values for image in self.infrastructures]
        return TrainingExample(query.values, keys, self.oracle_best)


@dataclass
class TrainingOutcome:
    state: AttentionState
    result: TrainingResult
    train_frames: int
    val_accuracy: float

    @property
    def loss_curve(self) -> pd.DataFrame:
        return pd.DataFrame({
            'epoch': np.arange(1, len(self.result.losses) + 1),
            'loss': self.result.losses,
            'train_accuracy': self.result.accuracies,
        })


@dataclass
class ComparisonRun:
    """Per-policy evaluations plus the per-frame ledger rows."""
    evaluations: Dict[str, PolicyEvaluation]
    ledger_rows: List[dict] = field(default_factory=list)
    selections: Dict[str, List[Optional[int]]] = field(default_factory=dict)


def _pooled(image: PseudoImage) -> PseudoImage:
    means = image.data.astype(np.float64).mean(axis=(1, 2))
    return PseudoImage(means.reshape(-1, 1, 1))


class ExperimentService(BaseService):
    """
    Experiment steps over one configuration.

    Examples:
        >>> with ExperimentService(ExperimentConfig.preset('t_junction')) as service:
        ...     service.generate('out/tj', seed=3)
    """

    def initialize(self):
        g = self.experiment.grid
        self.grid = PillarGrid(g.x_range, g.y_range, g.z_range, g.pillar_size)
        self.encoder = PillarEncoder(
            grid=self.grid,
            omega=g.omega,
            weights=SPointNetWeights.seeded(channels=g.channels, seed=g.seed),
            sampling_seed=g.seed,
        )
        n = self.experiment.network
        self.links = LinkModel(n.capacity, n.latency, n.loss_probability)
        self.simulator = NetworkSimulator(self.encoder, self.links, loss_seed=n.seed, logger=self.logger)
        self.workers = self.config.COOPDET_THREADS

    # ========== Dataset ==========

    def open_dataset(self, root: Union[str, Path]) -> DatasetStore:
        store = DatasetStore(root, self.logger)
        if not store.exists():
            raise DatasetError(f"no dataset at {root} (missing {PATHS['MANIFEST']})")
        return store

    @log_execution_time()
    def generate(self, out: Union[str, Path], seed: Optional[int] = None,
                 frames: Optional[int] = None) -> DatasetManifest:
        """Generate frames, write them with the manifest, split lists and experiment file."""
        seed = self.experiment.scenario.seed if seed is None else seed
        store = DatasetStore(out, self.logger)
        generator = SceneGenerator(self.experiment, self.logger, self.workers)
        scene_frames = generator.generate(seed, frames)

        manifest = DatasetManifest(
            scenario=self.experiment.scenario.name,
            master_seed=seed,
            infrastructures=self.experiment.scenario.num_infrastructures,
            config_digest=self.experiment.digest(),
        )
        for frame in scene_frames:
            manifest.frame_seeds[frame.frame_id] = frame.seed
            manifest.frame_digests[frame.frame_id] = store.write_frame(frame)
        manifest.splits = split_frames(list(manifest.frame_seeds), seed)

        store.write_manifest(manifest)
        store.experiment_path.write_text(self.experiment.to_text(), encoding='utf-8')
        sizes = {name: len(ids) for name, ids in manifest.splits.items()}
        self.logger.info(f"Dataset {out}: {manifest.frame_count} frames, splits {sizes}")
        return manifest

    def _map_frames(self, func, frame_ids: Sequence[int]) -> list:
        if self.workers <= 1 or len(frame_ids) <= 1:
            return [func(frame_id) for frame_id in frame_ids]
        with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix='frames') as pool:
            return list(pool.map(func, frame_ids))

    # ========== Attention Training ==========

    def summarize_frames(self, store: DatasetStore, frame_ids: Sequence[int]) -> List[FrameSummary]:
        """
        Encode each frame once and keep its channel means.

        Raises:
            DatasetError: If a frame with infrastructures has no oracle label
        """
        def summarize(frame_id: int) -> FrameSummary:
            frame = store.read_frame(frame_id)
            if frame.num_infrastructures == 0:
                raise DatasetError(f"frame {frame_id} has no infrastructure; nothing to learn")
            if frame.oracle_best is None:
                raise DatasetError(f"frame {frame_id} has no oracle-best label")
            images = self.simulator.encode_frame(frame)
            return FrameSummary(frame_id, _pooled(images.vehicle),
                                [_pooled(image) for image in images.infrastructures], frame.oracle_best)

        return self._map_frames(summarize, frame_ids)

    def seeded_state(self, query_size: Optional[int] = None, key_size: Optional[int] = None) -> AttentionState:
        a = self.experiment.attention
        return AttentionState.seeded(
            channels=self.encoder.channels,
            query_size=query_size or a.query_size,
            key_size=key_size or a.key_size,
            seed=a.seed,
            init_scale=a.init_scale,
        )

    def fit_attention(self, state: AttentionState, train: Sequence[FrameSummary],
                      val: Sequence[FrameSummary]) -> TrainingOutcome:
        a = self.experiment.attention
        trainer = AttentionTrainer(learning_rate=a.learning_rate, epochs=a.epochs)
        result = trainer.fit([s.example(state) for s in train], state.attention)
        trained = state.with_attention(result.weights)
        val_examples = [s.example(trained) for s in val]
        val_accuracy = selection_accuracy(result.weights, val_examples) if val_examples else float('nan')
        return TrainingOutcome(trained, result, len(train), val_accuracy)

    @log_execution_time()
    def train_attention(self, dataset: Union[str, Path]) -> TrainingOutcome:
        """Train W_a on the train split, save the state and the loss curve."""
        store = self.open_dataset(dataset)
        train = self.summarize_frames(store, store.split('train'))
        val = self.summarize_frames(store, store.split('val'))
        if not train:
            raise DatasetError(f"dataset {dataset} has an empty train split")

        outcome = self.fit_attention(self.seeded_state(), train, val)
        outcome.state.save(store.attention_dir)
        outcome.loss_curve.to_csv(store.attention_dir / PATHS['LOSS_CURVE'], index=False,
                                  float_format=self.config.REPORT_FLOAT_FORMAT)
        final_loss = outcome.result.losses[-1] if outcome.result.losses else float('nan')
        self.logger.info(
            f"Trained attention on {len(train)} frames: final loss {final_loss:.6f}, "
            f"val selection accuracy {outcome.val_accuracy:.2%}"
        )
        return outcome

    def load_attention(self, store: DatasetStore) -> AttentionState:
        directory = store.attention_dir
        if not all((directory / name).exists() for name in AttentionState.FILES.values()):
            raise DatasetError(f"no trained attention state in {directory}; run train-attention first")
        try:
            return AttentionState.load(directory)
        except ValueError as e:
            raise DatasetError(f"unreadable attention state in {directory}: {e}") from e

    # ========== Policy Comparison ==========

    def build_policies(self, names: Sequence[Union[str, PolicyName]],
                       store: Optional[DatasetStore] = None) -> List[Policy]:
        keys = [n.value if isinstance(n, PolicyName) else n for n in names]
        state = None
        if PolicyName.LEARN2COM.value in keys:
            if store is None:
                raise DatasetError("Learn2com needs a dataset with a trained attention state")
            state = self.load_attention(store)
        return [policy_from_name(key, state, self.experiment.compare.random_seed) for key in keys]

    def _evaluate_frame(self, frame: SceneFrame, policies: Sequence[Policy]) -> List[Tuple[FrameResult, list, list]]:
        d = self.experiment.detection
        images = self.simulator.encode_frame(frame)
        truths = frame.ground_truth(self.grid)
        outputs = []
        for policy in policies:
            result = self.simulator.run_frame(frame, policy, images)
            detections = oracle_detect(frame, result.participants, d.threshold, d.noise_scale,
                                       d.score_kappa, self.grid)
            outputs.append((result, detections, truths))
        return outputs

    def evaluate_policies(self, store: DatasetStore, frame_ids: Sequence[int],
                          policies: Sequence[Policy]) -> ComparisonRun:
        """Run every policy on every frame and score the oracle detections."""
        per_frame = self._map_frames(
            lambda frame_id: self._evaluate_frame(store.read_frame(frame_id), policies), frame_ids
        )

        run = ComparisonRun(evaluations={})
        d = self.experiment.detection
        for index, policy in enumerate(policies):
            outputs = [frame_outputs[index] for frame_outputs in per_frame]
            pairs = [(detections, truths) for _, detections, truths in outputs]
            results = [result for result, _, _ in outputs]
            count = len(results)
            run.evaluations[policy.name] = PolicyEvaluation(
                policy=policy.name,
                ap=evaluate_frames(pairs, d.iou_threshold),
                bytes_per_frame=sum(r.ledger.total_bytes for r in results) / count if count else 0.0,
                gross_bytes_per_frame=sum(r.ledger.gross_bytes for r in results) / count if count else 0.0,
                mean_latency=sum(r.latency for r in results) / count if count else 0.0,
                frames=count,
            )
            run.selections[policy.name] = [r.selected for r in results]
            for result in results:
                run.ledger_rows.extend(result.ledger.rows(result.frame_id, policy.name))
        return run

    @log_execution_time()
    def compare(self, dataset: Union[str, Path], policy_names: Optional[Sequence[str]] = None,
                out: Optional[Union[str, Path]] = None) -> EvaluationReport:
        """Evaluate the policies on the configured split and write the report tables."""
        store = self.open_dataset(dataset)
        names = list(policy_names or self.experiment.compare.policies)
        policies = self.build_policies(names, store)
        baseline_missing = PolicyName.LOC_VEHICLE.value not in names
        if baseline_missing:
            policies.append(policy_from_name(PolicyName.LOC_VEHICLE))

        frame_ids = store.split(self.experiment.compare.split)
        self.logger.info(f"Comparing {', '.join(names)} on {len(frame_ids)} "
                         f"{self.experiment.compare.split} frames")
        run = self.evaluate_policies(store, frame_ids, policies)

        baseline = run.evaluations[PolicyName.LOC_VEHICLE.value]
        report = EvaluationReport(
            [run.evaluations[name] for name in names],
            baseline=baseline,
            aib_bucket=self.experiment.detection.aib_bucket,
        )
        out = Path(out or self.experiment.output.directory)
        report.write(out)
        pd.DataFrame(run.ledger_rows, columns=['frame', 'policy', 'kind', 'bytes', 'kb']).to_csv(
            out / PATHS['LEDGER_REPORT'], index=False, float_format=self.config.REPORT_FLOAT_FORMAT
        )
        return report

    # ========== Inspection ==========

    def inspect(self, dataset: Union[str, Path], frame_id: int,
                policy_names: Optional[Sequence[str]] = None,
                out: Optional[Union[str, Path]] = None) -> List[FrameResult]:
        """Run the policies on one frame and dump each message trace."""
        store = self.open_dataset(dataset)
        names = list(policy_names or self.experiment.compare.policies)
        policies = self.build_policies(names, store)
        frame = store.read_frame(frame_id)
        images = self.simulator.encode_frame(frame)

        out = Path(out or self.experiment.output.directory)
        out.mkdir(parents=True, exist_ok=True)
        results = []
        for policy in policies:
            result = self.simulator.run_frame(frame, policy, images)
            write_trace(out / PATHS['TRACE_FILE'].format(policy=policy.name), result.messages)
            results.append(result)
        return results

    # ========== Ablation ==========

    def learn2com_bytes(self, query_size: int) -> int:
        """Counted Learn2com bytes per frame for a query size and the encoder's image shape."""
        query = ProtocolMessage.build(QueryBroadcast((0.0,) * query_size, (0.0,) * 4), 0, 0)
        payload = ProtocolMessage.build(FeaturePayload(PseudoImage.zeros(*self.encoder.image_shape())), 0, 1)
        return query.counted_bytes + payload.counted_bytes

    @log_execution_time()
    def ablate(self, dataset: Union[str, Path], out: Optional[Union[str, Path]] = None) -> pd.DataFrame:
        """Validation selection accuracy and bandwidth across query and key sizes."""
        store = self.open_dataset(dataset)
        train = self.summarize_frames(store, store.split('train'))
        val = self.summarize_frames(store, store.split('val'))
        if not train:
            raise DatasetError(f"dataset {dataset} has an empty train split")

        a = self.experiment.attention
        settings = [(q, a.key_size) for q in ABLATION_QUERY_SIZES]
        settings += [(a.query_size, k) for k in ABLATION_KEY_SIZES if (a.query_size, k) not in settings]

        rows = []
        for query_size, key_size in settings:
            outcome = self.fit_attention(self.seeded_state(query_size, key_size), train, val)
            rows.append({
                'query_size': query_size,
                'key_size': key_size,
                'val_accuracy': outcome.val_accuracy,
                'kb_per_frame': self.learn2com_bytes(query_size) / UNITS['KB'],
            })
            self.logger.info(f"Ablation q={query_size} k={key_size}: val accuracy {outcome.val_accuracy:.2%}")

        table = pd.DataFrame(rows, columns=['query_size', 'key_size', 'val_accuracy', 'kb_per_frame'])
        out = Path(out or self.experiment.output.directory)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / PATHS['ABLATION_REPORT'], index=False, float_format=self.config.REPORT_FLOAT_FORMAT)
        return table
