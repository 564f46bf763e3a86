__all__ = ['lrn_net', 'lrn_optim', 'lrn_ckpt', 'lrn']
