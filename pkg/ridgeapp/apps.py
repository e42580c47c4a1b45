from django.apps import AppConfig


class RidgeappConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'ridgeapp'
    verbose_name = 'Ridge double-descent lab'
