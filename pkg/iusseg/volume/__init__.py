__all__ = ['vol', 'vol_io']
