from maxlocal.base import BaseConfigPreprocessor
from maxlocal.constants import MIN_DIMENSION, Direction, Subcommand
from maxlocal.forcing import validate_eta
from maxlocal.models import ExperimentConfig


class ConfigPreprocessor(BaseConfigPreprocessor):
    """
    Rejects experiment configs that leave the parameter ranges of the results
    they test. Every message names the violated relation.
    """

    def validate_dimension(self, config: ExperimentConfig) -> None:
        if config.d < MIN_DIMENSION:
            raise ValueError(f"Dimension must satisfy d >= 3, got d={config.d}.")
        if len(config.y) != config.d:
            raise ValueError(f"Site y must have d={config.d} coordinates, got {config.y}.")
        if config.subcommand == Subcommand.LAWS and not any(config.y):
            raise ValueError("Two-point site must satisfy y != 0.")

    def validate_horizons(self, config: ExperimentConfig) -> None:
        for horizon in config.horizons:
            if not horizon > 1:
                raise ValueError(f"Horizons must satisfy n > 1, got {horizon}.")
        if config.subcommand == Subcommand.GUMBEL:
            ladder = config.horizons
            if any(b <= a for a, b in zip(ladder, ladder[1:])):
                raise ValueError(f"Gumbel horizons must be increasing, got {ladder}.")

    def validate_beta(self, config: ExperimentConfig) -> None:
        beta = config.beta
        if config.subcommand == Subcommand.COUNT:
            if beta is None or not beta > 1.0:
                raise ValueError(f"Exceedance moments require beta > 1, got {beta}.")
        elif config.subcommand == Subcommand.TAIL:
            if beta is None:
                raise ValueError("Tail queries require beta.")
            if config.direction == Direction.UP and beta < 1.0:
                raise ValueError(f"Upward deviations require beta > 1, got {beta}.")
            if config.direction == Direction.DOWN and not 0.0 < beta <= 1.0:
                raise ValueError(
                    f"Downward deviations require 0 < beta <= 1, got {beta}."
                )
        elif config.subcommand == Subcommand.FORCING or (
            config.subcommand == Subcommand.SEGMENTS and beta is not None
        ):
            if beta is None or not 0.0 < beta <= 1.0:
                raise ValueError(f"Forcing requires 0 < beta <= 1, got {beta}.")

    def validate_kappa(self, config: ExperimentConfig) -> None:
        if config.subcommand not in (Subcommand.FORCING, Subcommand.SEGMENTS):
            return
        if config.beta is None:
            return
        lower = 1.0 - config.beta / 2.0
        if not lower < config.kappa < 1.0:
            raise ValueError(
                f"kappa must satisfy 1 - beta/2 < kappa < 1, "
                f"got kappa={config.kappa}, 1 - beta/2={lower}."
            )

    def validate_segments(self, config: ExperimentConfig) -> None:
        if config.subcommand != Subcommand.SEGMENTS:
            return
        beta1, beta2 = config.beta1, config.beta2
        if beta1 is None or beta2 is None:
            raise ValueError("Segment statistics require beta1 and beta2.")
        if not 2.0 * beta1 / config.d < beta2 < beta1:
            raise ValueError(
                f"Segment exponents must satisfy 2 beta1/d < beta2 < beta1, "
                f"got beta1={beta1}, beta2={beta2}."
            )
        if config.beta is not None and not beta1 < config.beta:
            raise ValueError(
                f"Segment exponents must satisfy beta1 < beta, "
                f"got beta1={beta1}, beta={config.beta}."
            )

    def validate_block_bound(self, config: ExperimentConfig) -> None:
        if config.subcommand != Subcommand.TAIL or config.beta_prime is None:
            return
        if config.direction != Direction.DOWN:
            raise ValueError("The block bound applies to downward deviations only.")
        if not 0.0 < config.beta_prime < config.beta <= 1.0:
            raise ValueError(
                f"Block bound requires 0 < beta' < beta <= 1, "
                f"got beta'={config.beta_prime}, beta={config.beta}."
            )

    def validate_eta(self, config: ExperimentConfig, gamma: float) -> None:
        if config.subcommand != Subcommand.FORCING:
            return
        validate_eta(config.eta, config.delta, gamma)

    def run(self, config: ExperimentConfig) -> ExperimentConfig:
        """Checks that need no lattice constants. validate_eta runs once gamma is known."""
        self.validate_dimension(config)
        self.validate_horizons(config)
        self.validate_beta(config)
        self.validate_kappa(config)
        self.validate_segments(config)
        self.validate_block_bound(config)
        return config
