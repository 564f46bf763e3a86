__all__ = ['infrm']
