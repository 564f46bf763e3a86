__all__ = ['log']
