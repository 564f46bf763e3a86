__all__ = ['mtrc']
