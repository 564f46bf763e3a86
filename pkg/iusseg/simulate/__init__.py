__all__ = ['sim_rng', 'sim_physics', 'sim_psf', 'sim']
